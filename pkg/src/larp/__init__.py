"""Holistic video tokenization with a co-trained autoregressive prior, at desk scale."""

from .config import ConfigError, RunConfig
from .tokenizer import Tokenizer, TokenizerConfig, psnr

__all__ = ["ConfigError", "RunConfig", "Tokenizer", "TokenizerConfig", "psnr"]
__version__ = "0.1.0"
