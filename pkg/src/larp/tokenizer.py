"""Holistic video tokenizer.

Encoder input is ``[holistic queries | patch embeddings + 3-D position]``;
only the query slots of the encoder output are quantized. The decoder input
is ``[patch queries | dequantized tokens + 1-D position]`` and its first m
output rows are projected back to pixels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import LayerNorm, Linear, Module, Tensor, Transformer, no_grad, ops, sincos_1d
from .numerics.layers import init_const, init_normal
from .quantizer import QuantizerConfig, StochasticQuantizer
from .videodata import DataError, PatchConfig, unpatchify_tensor


@dataclass
class TokenizerConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    f_t: int = 2
    f_h: int = 4
    f_w: int = 4
    d: int = 128
    heads: int = 4
    enc_depth: int = 4
    dec_depth: int = 4
    n_tokens: int = 64
    codebook_size: int = 512
    code_dim: int = 8
    mlp_ratio: int = 4

    @property
    def extents(self) -> tuple[int, int, int]:
        return (self.frames, self.height, self.width)

    @property
    def factors(self) -> tuple[int, int, int]:
        return (self.f_t, self.f_h, self.f_w)


class Tokenizer(Module):
    """Learned-query encoder, stochastic quantizer and query-driven decoder."""

    def __init__(self, rng: np.random.Generator, cfg: TokenizerConfig, qcfg: QuantizerConfig | None = None):
        self.cfg = cfg
        d, n = cfg.d, cfg.n_tokens
        if n < 1:
            raise ValueError("need at least one holistic token")
        self.patch = PatchConfig(rng, cfg.extents, cfg.factors, d)
        m = self.patch.m
        self.holistic_queries = init_normal(rng, (n, d), 0.02)
        self.patch_queries = init_normal(rng, (m, d), 0.02)
        # fan-in init keeps the query outputs clearly video dependent at step 0, which the
        # quantizer needs to hand the decoder informative tokens before it settles on the mean clip
        self.encoder = Transformer(rng, d, cfg.enc_depth, cfg.heads, mlp_ratio=cfg.mlp_ratio, fan_in_init=True)
        self.quantizer = StochasticQuantizer(rng, d, cfg.code_dim, cfg.codebook_size, qcfg)
        self.holistic_pos_enc = sincos_1d(n, d)
        self.decoder = Transformer(rng, d, cfg.dec_depth, cfg.heads, mlp_ratio=cfg.mlp_ratio, fan_in_init=True)
        self.to_pixels = Linear(rng, d, self.patch.patch_dim, std=0.02)
        self.to_pixels.b = init_const((self.patch.patch_dim,), 0.5)

    @property
    def n(self) -> int:
        return self.cfg.n_tokens

    @property
    def m(self) -> int:
        return self.patch.m

    @property
    def codebook_size(self) -> int:
        return self.quantizer.book.size

    def encode(self, video, rng: np.random.Generator | None = None, deterministic: bool | None = None):
        """Quantize a clip (T, H, W, 3) or batch (B, T, H, W, 3).

        Returns ``(tokens (B, n), dequantized (B, n, d), svq_loss)``.
        """
        emb = self.patch(video)
        B = emb.shape[0]
        n = self.n
        x = ops.concat([ops.broadcast_to(self.holistic_queries, (B, n, self.cfg.d)), emb + self.patch.pos_enc], axis=1)
        # only the query rows reach the quantizer; the patch rows are dropped inside the last block
        z = self.encoder(x, keep=n)
        out = self.quantizer(z, rng, deterministic)
        return out.tokens, out.dequantized, out.loss

    def decode_latents(self, latents: Tensor, clamp: bool = True) -> Tensor:
        """Decode (B, n, d) dequantized latents to a (B, T, H, W, 3) video tensor."""
        B, n, d = latents.shape
        if n != self.n:
            raise DataError(f"expected {self.n} latent tokens, got {n}")
        m = self.m
        x = ops.concat([ops.broadcast_to(self.patch_queries, (B, m, d)), latents + self.holistic_pos_enc], axis=1)
        y = self.decoder(x, keep=m)
        pix = unpatchify_tensor(self.to_pixels(y), self.cfg.extents, self.cfg.factors)
        return ops.clamp(pix, 0.0, 1.0) if clamp else pix

    def decode(self, tokens) -> np.ndarray:
        """Decode token indices (n,) or (B, n) to videos; pure function of (tokens, params)."""
        tok = np.asarray(tokens, dtype=np.int64)
        single = tok.ndim == 1
        if single:
            tok = tok[None]
        if tok.shape[-1] != self.n:
            raise DataError(f"expected {self.n} tokens, got {tok.shape[-1]}")
        with no_grad():
            video = self.decode_latents(self.quantizer.dequantize(tok)).data
        return video[0] if single else video

    def reconstruct(self, video, rng: np.random.Generator | None = None, deterministic: bool | None = None):
        """Differentiable round trip: ``(v_hat, l1, svq_loss)`` as tensors."""
        v = np.asarray(video)
        if v.ndim == 4:
            v = v[None]
        _, latents, svq_loss = self.encode(v, rng, deterministic)
        v_hat = self.decode_latents(latents)
        return v_hat, ops.l1_distance(v_hat, Tensor(v, dtype=v_hat.dtype)), svq_loss

    def tokenize(self, videos, batch_size: int = 16) -> np.ndarray:
        """Deterministic token indices for a list/array of clips, (N, n)."""
        vids = np.asarray(videos)
        if vids.ndim == 4:
            vids = vids[None]
        out = []
        with no_grad():
            for i in range(0, len(vids), batch_size):
                tok, _, _ = self.encode(vids[i:i + batch_size], None, deterministic=True)
                out.append(tok)
        return np.concatenate(out, axis=0)

    def reconstruct_numpy(self, videos, batch_size: int = 16) -> np.ndarray:
        """Deterministic reconstructions without graph recording."""
        vids = np.asarray(videos)
        single = vids.ndim == 4
        if single:
            vids = vids[None]
        outs = []
        with no_grad():
            for i in range(0, len(vids), batch_size):
                v_hat, _, _ = self.reconstruct(vids[i:i + batch_size], None, deterministic=True)
                outs.append(v_hat.data.astype(np.float64))
        res = np.concatenate(outs, axis=0)
        return res[0] if single else res


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] videos; ``inf`` when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"psnr: extent mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# -- TS01 token files ---------------------------------------------------------------

TS_MAGIC = b"TS01"


def encode_tokens(tokens, c: int) -> bytes:
    tok = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tok.size and (tok.min() < 0 or tok.max() >= c):
        raise DataError(f"token outside [0, {c})")
    return TS_MAGIC + struct.pack("<II", tok.size, c) + tok.astype("<u4").tobytes()


def decode_tokens(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int, int]:
    """Parse one TS01 record; return ``(tokens, c, end_offset)``."""
    if buf[offset:offset + 4] != TS_MAGIC:
        raise DataError(f"bad TS01 magic at offset {offset}")
    if offset + 12 > len(buf):
        raise DataError(f"truncated TS01 header at offset {offset}")
    n, c = struct.unpack_from("<II", buf, offset + 4)
    start = offset + 12
    if start + 4 * n > len(buf):
        raise DataError(f"truncated TS01 payload at offset {start}")
    tok = np.frombuffer(buf, dtype="<u4", count=n, offset=start).astype(np.int64)
    if n and tok.max() >= c:
        raise DataError(f"TS01 record at offset {offset} holds a token >= {c}")
    return tok, c, start + 4 * n


def save_token_file(path, sequences, c: int) -> None:
    Path(path).write_bytes(b"".join(encode_tokens(s, c) for s in sequences))


def load_token_file(path) -> tuple[list[np.ndarray], int]:
    buf = Path(path).read_bytes()
    seqs, pos, c = [], 0, None
    while pos < len(buf):
        tok, c_rec, pos = decode_tokens(buf, pos)
        if c is not None and c_rec != c:
            raise DataError(f"{path}: mixed codebook sizes {c} and {c_rec}")
        c = c_rec
        seqs.append(tok)
    return seqs, (c or 0)
