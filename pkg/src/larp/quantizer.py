"""Stochastic vector quantization over a factorized cosine codebook.

Latents of width ``d`` are projected down to the code width ``d'``, scored
against every code by cosine similarity, and a code index is drawn from
``softmax(similarity / temperature)`` (or taken as the argmax in
deterministic mode). The forward value becomes the chosen code vector while
the backward pass treats the lookup as identity (straight-through).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Linear, Module, Tensor, ops
from .numerics.layers import init_normal


class QuantizerError(ValueError):
    pass


@dataclass
class QuantizerConfig:
    temperature: float = 0.03
    commitment_weight: float = 0.25
    codebook_weight: float = 1.0
    total_weight: float = 0.1
    deterministic: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise QuantizerError("temperature must be positive")
        if min(self.commitment_weight, self.codebook_weight, self.total_weight) < 0:
            raise QuantizerError("loss weights must be non-negative")


class Codebook(Module):
    """c x d' matrix of code vectors, kept on the unit sphere.

    Selection only sees directions, so unit rows make codes that are close in
    cosine also close as vectors: a sampled neighbour of the best code hands
    the decoder a small perturbation rather than a change of scale.
    """

    MIN_NORM = 1e-8

    def __init__(self, rng: np.random.Generator, c: int, d_code: int):
        if c < 2:
            raise QuantizerError("codebook needs at least 2 codes")
        self.vectors = init_normal(rng, (c, d_code), 1.0)
        self.renormalize(rng)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def repair(self, rng: np.random.Generator) -> np.ndarray:
        """Re-draw any code whose norm has collapsed; return the repaired indices."""
        norms = np.linalg.norm(self.vectors.data, axis=1)
        bad = np.flatnonzero(norms < self.MIN_NORM)
        if bad.size:
            self.vectors.data[bad] = rng.normal(size=(bad.size, self.dim))
        return bad

    def renormalize(self, rng: np.random.Generator) -> np.ndarray:
        """Project every row back to unit norm (after repairing collapsed rows)."""
        bad = self.repair(rng)
        v = self.vectors.data
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return bad


def _as_rows(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)


def cosine_scores(v, codes) -> np.ndarray:
    """Cosine similarity of each row of ``v`` (..., d') against every code (c, d')."""
    v = _as_rows(v)
    codes = _as_rows(codes)
    vn = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(vn == 0):
        raise QuantizerError("cannot quantize a zero-norm vector")
    cn = np.linalg.norm(codes, axis=-1)
    return (v / vn) @ (codes / np.maximum(cn, 1e-300)[:, None]).T


def code_probs(v, book, temperature: float) -> np.ndarray:
    """Probability of each code for ``v``: softmax of cosine similarities / temperature."""
    codes = book.vectors if isinstance(book, Codebook) else book
    s = cosine_scores(v, codes) / temperature
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One multinomial draw per row of ``probs`` (inverse-CDF)."""
    probs = np.asarray(probs)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    idx = (cdf <= u).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def quantize(v, book, cfg: QuantizerConfig, rng: np.random.Generator | None = None):
    """Code index for ``v`` (scalar for a single vector, array for a batch of rows)."""
    p = code_probs(v, book, cfg.temperature)
    if cfg.deterministic:
        idx = np.argmax(p, axis=-1)
    else:
        if rng is None:
            raise QuantizerError("stochastic quantization needs an rng")
        idx = sample_index(p, rng)
    return int(idx) if np.ndim(idx) == 0 else idx


def dequantize(x, book) -> np.ndarray:
    codes = _as_rows(book.vectors if isinstance(book, Codebook) else book)
    x = np.asarray(x)
    if np.any(x < 0) or np.any(x >= codes.shape[0]):
        raise QuantizerError(f"code index out of range [0, {codes.shape[0]})")
    return codes[x]


@dataclass
class SVQOutput:
    tokens: np.ndarray        # (B, n) int64
    dequantized: Tensor       # (B, n, d) straight-through output
    loss: Tensor              # scalar
    projected: np.ndarray     # (B, n, d') encoder outputs in code space


class StochasticQuantizer(Module):
    """Factorized SVQ: projector_in (d -> d'), codebook, projector_out (d' -> d)."""

    def __init__(self, rng: np.random.Generator, d: int, d_code: int, c: int, cfg: QuantizerConfig | None = None):
        self.cfg = cfg or QuantizerConfig()
        self.projector_in = Linear(rng, d, d_code, bias=False)
        self.book = Codebook(rng, c, d_code)
        self.projector_out = Linear(rng, d_code, d, bias=False)
        self.usage = np.zeros(c, dtype=np.int64)
        self.check_state: dict | None = None

    def enter_check_mode(self) -> None:
        """Make the loss classically differentiable for finite-difference checks.

        The quantized value is replaced by its continuous input (so the
        straight-through backward is the exact derivative), and stop-gradient
        operands are frozen at their values from the next forward call.
        """
        self.check_state = {}

    def __call__(self, latents: Tensor, rng: np.random.Generator | None, deterministic: bool | None = None) -> SVQOutput:
        cfg = self.cfg
        det = cfg.deterministic if deterministic is None else deterministic
        z = self.projector_in(latents)
        p = code_probs(z.data, self.book, cfg.temperature)
        if det:
            tokens = np.argmax(p, axis=-1)
        else:
            if rng is None:
                raise QuantizerError("stochastic quantization needs an rng")
            tokens = sample_index(p, rng)
        code = ops.take_rows(self.book.vectors, tokens)
        z_sg, code_sg = z.detach(), code.detach()
        if self.check_state is not None:
            frozen = self.check_state.setdefault("sg", (z_sg, code_sg))
            z_sg, code_sg = frozen
        # codebook term moves codes toward sg(z); commitment term moves z toward sg(code)
        codebook_term = ops.sum(ops.square(code - z_sg), axis=-1).mean()
        commit_term = ops.sum(ops.square(z - code_sg), axis=-1).mean()
        loss = (codebook_term * cfg.codebook_weight + commit_term * cfg.commitment_weight) * cfg.total_weight
        zq = z if self.check_state is not None else ops.straight_through(z, code.data)
        return SVQOutput(tokens, self.projector_out(zq), loss, z.data)

    def dequantize(self, tokens) -> Tensor:
        """Code vectors for ``tokens`` lifted back to width d (differentiable in codebook and projector)."""
        tokens = np.asarray(tokens)
        if np.any(tokens < 0) or np.any(tokens >= self.book.size):
            raise QuantizerError(f"code index out of range [0, {self.book.size})")
        return self.projector_out(ops.take_rows(self.book.vectors, tokens))

    def record_usage(self, tokens: np.ndarray) -> None:
        np.add.at(self.usage, np.asarray(tokens).reshape(-1), 1)

    def reseed_dead(self, rng: np.random.Generator, recent: np.ndarray) -> np.ndarray:
        """Move codes unused since the last call onto random recent encoder outputs."""
        dead = np.flatnonzero(self.usage == 0)
        if dead.size and recent.size:
            pool = recent.reshape(-1, self.book.dim)
            pick = rng.integers(0, pool.shape[0], size=dead.size)
            self.book.vectors.data[dead] = pool[pick] + rng.normal(0.0, 1e-3, size=(dead.size, self.book.dim))
        self.book.renormalize(rng)
        self.usage[:] = 0
        return dead
