"""Continuous autoregressive prior over dequantized token latents.

The input head is a linear map of the dequantized latents (so gradients
reach the tokenizer), and the output head predicts a code-space vector whose
cosine similarity against the live codebook gives next-token probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Linear, Module, Tensor, Transformer, no_grad, ops
from .numerics.layers import init_normal
from .quantizer import Codebook, StochasticQuantizer, sample_index


@dataclass
class SampleSchedule:
    peak_rate: float = 0.5
    warm_frac: float = 0.30
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.peak_rate <= 1.0:
            raise ValueError("peak_rate must lie in [0, 1]")
        if not 0.0 < self.warm_frac <= 1.0:
            raise ValueError("warm_frac must lie in (0, 1]")


def mix_rate(step: int, sched: SampleSchedule) -> float:
    """Linear ramp from 0 at step 0 to ``peak_rate`` at ``warm_frac * total_steps``, then flat."""
    if step < 0:
        raise ValueError("step must be non-negative")
    warm = sched.warm_frac * sched.total_steps
    if warm <= 0 or step >= warm:
        return float(sched.peak_rate)
    return float(sched.peak_rate * step / warm)


@dataclass
class PriorConfig:
    d_p: int = 128
    depth: int = 2
    heads: int = 4
    output_temperature: float = 0.03


class PriorModel(Module):
    """Causal transformer predicting the next token's code vector."""

    def __init__(self, rng: np.random.Generator, d: int, code_dim: int, n_tokens: int, cfg: PriorConfig | None = None):
        self.cfg = cfg or PriorConfig()
        dp = self.cfg.d_p
        self.n_tokens = n_tokens
        self.input_proj = Linear(rng, d, dp)
        self.bos_embedding = init_normal(rng, (1, 1, dp), 0.02)
        self.pos_embedding = init_normal(rng, (n_tokens, dp), 0.02)
        self.trunk = Transformer(rng, dp, self.cfg.depth, self.cfg.heads, causal=True)
        self.output_proj = Linear(rng, dp, code_dim)

    def predict(self, latents: Tensor) -> Tensor:
        """Predicted code vectors (B, k+1, d') for latents (B, k, d); row i sees only rows < i."""
        B, k, _ = latents.shape
        dp = self.cfg.d_p
        parts = [ops.broadcast_to(self.bos_embedding, (B, 1, dp))]
        if k:
            parts.append(self.input_proj(latents))
        x = ops.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        x = x + self.pos_embedding[: k + 1]
        return self.output_proj(self.trunk(x))

    def logits(self, latents: Tensor, book: Codebook) -> Tensor:
        """Scaled cosine logits (B, n, c) for predicting tokens 1..n from latents 1..n-1."""
        pred = self.predict(latents[:, :-1])
        sim = ops.cosine_similarity(pred, book.vectors)
        return sim * (1.0 / self.cfg.output_temperature)


def prior_logits(latents, book: Codebook, prior: PriorModel) -> np.ndarray:
    """Probability table (B, n, c) (or (n, c) for a single sequence)."""
    lat = latents if isinstance(latents, Tensor) else Tensor(latents)
    single = lat.ndim == 2
    if single:
        lat = lat.reshape(1, *lat.shape)
    with no_grad():
        lg = prior.logits(lat, book).data.astype(np.float64)
    lg -= lg.max(axis=-1, keepdims=True)
    p = np.exp(lg)
    p /= p.sum(axis=-1, keepdims=True)
    return p[0] if single else p


@dataclass
class PriorLossOutput:
    loss: Tensor
    nll_first: float
    nll_second: float
    replaced: np.ndarray      # (B, n) bool: positions swapped for sampled predictions


def prior_loss(tokens, latents: Tensor, quantizer: StochasticQuantizer, prior: PriorModel, step: int,
               sched: SampleSchedule, rng: np.random.Generator) -> PriorLossOutput:
    """Two-round scheduled-sampling NLL, averaged per token then per round.

    Round 1 is teacher forced. Each position is then replaced, with
    probability ``mix_rate(step)``, by a token sampled from its round-1
    prediction (re-dequantized through the codebook), and round 2 scores the
    same targets on the mixed input.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    book = quantizer.book
    logits1 = prior.logits(latents, book)
    nll1 = ops.cross_entropy(logits1, tokens)
    rate = mix_rate(step, sched)
    if rate <= 0.0:
        return PriorLossOutput(nll1, float(nll1.data), float(nll1.data), np.zeros(tokens.shape, dtype=bool))
    lg = logits1.data.astype(np.float64)
    lg = lg - lg.max(axis=-1, keepdims=True)
    p = np.exp(lg)
    p /= p.sum(axis=-1, keepdims=True)
    sampled = sample_index(p, rng)
    replace = rng.random(tokens.shape) < rate
    mixed_tokens = np.where(replace, sampled, tokens)
    redeq = quantizer.dequantize(mixed_tokens)
    keep = Tensor((~replace)[..., None].astype(latents.dtype))
    mixed = latents * keep + redeq * (1.0 - keep.data)
    nll2 = ops.cross_entropy(prior.logits(mixed, book), tokens)
    loss = (nll1 + nll2) * 0.5
    return PriorLossOutput(loss, float(nll1.data), float(nll2.data), replace)


def sample_next(prefix_latents, book: Codebook, prior: PriorModel, rng: np.random.Generator) -> int:
    """Draw the token at position k given k prefix latents (k x d)."""
    lat = prefix_latents if isinstance(prefix_latents, Tensor) else Tensor(np.asarray(prefix_latents))
    if lat.ndim == 2:
        lat = lat.reshape(1, *lat.shape)
    with no_grad():
        pred = prior.predict(lat)[:, -1]
        lg = (ops.cosine_similarity(pred, book.vectors) * (1.0 / prior.cfg.output_temperature)).data
    lg = lg.astype(np.float64)
    lg -= lg.max(axis=-1, keepdims=True)
    p = np.exp(lg)
    p /= p.sum(axis=-1, keepdims=True)
    return int(sample_index(p, rng)[0])
