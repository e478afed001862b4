"""Autoregressive generator over tokenizer indices.

Vocabulary layout: ``[0, c)`` codebook tokens, ``[c, c+J)`` class tokens,
``c+J`` the null class (unconditional branch for guidance), ``c+J+1`` the
[sep] token separating frame-prediction conditioning from targets. The
output head covers codebook indices only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import LayerNorm, Linear, Module, Tensor, Transformer, no_grad, ops
from .numerics.layers import init_normal
from .quantizer import sample_index
from .videodata import repeat_pad


@dataclass
class GeneratorConfig:
    d_g: int = 192
    depth: int = 4
    heads: int = 4
    token_dropout: float = 0.1
    resid_dropout: float = 0.1
    ff_dropout: float = 0.1


@dataclass
class CfgConfig:
    scale: float = 1.25
    class_drop_prob: float = 0.1


class Generator(Module):
    def __init__(self, rng: np.random.Generator, c: int, num_classes: int, n_tokens: int,
                 cfg: GeneratorConfig | None = None, max_len: int | None = None):
        self.cfg = cfg or GeneratorConfig()
        self.c = c
        self.num_classes = num_classes
        self.n_tokens = n_tokens
        self.max_len = max_len or 2 * n_tokens + 1
        dg = self.cfg.d_g
        self.embedding = init_normal(rng, (c + num_classes + 2, dg), 0.02)
        self.pos_embedding = init_normal(rng, (self.max_len, dg), 0.02)
        self.trunk = Transformer(rng, dg, self.cfg.depth, self.cfg.heads, causal=True)
        self.head = Linear(rng, dg, c, std=0.02)

    @property
    def null_id(self) -> int:
        return self.c + self.num_classes

    @property
    def sep_id(self) -> int:
        return self.c + self.num_classes + 1

    def class_id(self, k: int) -> int:
        if not 0 <= k < self.num_classes:
            raise ValueError(f"class {k} outside [0, {self.num_classes})")
        return self.c + k

    def __call__(self, ids, rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
        """Logits (B, L, c) for input ids (B, L)."""
        ids = np.asarray(ids, dtype=np.int64)
        L = ids.shape[1]
        if L > self.max_len:
            raise ValueError(f"sequence length {L} exceeds {self.max_len}")
        x = ops.take_rows(self.embedding, ids) + self.pos_embedding[:L]
        x = ops.dropout(x, self.cfg.token_dropout, rng, training)
        h = self.trunk(x, rng=rng, resid_drop=self.cfg.resid_dropout, ff_drop=self.cfg.ff_dropout, training=training)
        return self.head(h)


def class_inputs(seqs: np.ndarray, classes: np.ndarray, gen: Generator, cfg: CfgConfig,
                 rng: np.random.Generator | None) -> np.ndarray:
    """``[cls_or_null, x_1 .. x_{n-1}]`` rows; the class slot becomes null with ``class_drop_prob``."""
    seqs = np.asarray(seqs, dtype=np.int64)
    cls = np.asarray(classes, dtype=np.int64) + gen.c
    if cfg.class_drop_prob > 0 and rng is not None:
        cls = np.where(rng.random(cls.shape) < cfg.class_drop_prob, gen.null_id, cls)
    return np.concatenate([cls[:, None], seqs[:, :-1]], axis=1)


def gen_loss(seqs, classes, gen: Generator, cfg: CfgConfig, rng: np.random.Generator | None,
             training: bool = True) -> Tensor:
    """Class-conditional next-token NLL averaged over all n positions."""
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    classes = np.atleast_1d(np.asarray(classes, dtype=np.int64))
    inp = class_inputs(seqs, classes, gen, cfg, rng if training else None)
    return ops.cross_entropy(gen(inp, rng, training), seqs)


def frame_inputs(cond: np.ndarray, target: np.ndarray, gen: Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ids ``[cond.., sep, x_1..x_{n-1}]``, targets and loss mask (targets after [sep] only)."""
    cond = np.atleast_2d(np.asarray(cond, dtype=np.int64))
    target = np.atleast_2d(np.asarray(target, dtype=np.int64))
    B, n = target.shape
    sep = np.full((B, 1), gen.sep_id, dtype=np.int64)
    ids = np.concatenate([cond, sep, target[:, :-1]], axis=1)
    tgt = np.concatenate([np.zeros_like(cond), target], axis=1)
    mask = np.concatenate([np.zeros(cond.shape), np.ones(target.shape)], axis=1)
    return ids, tgt, mask


def frame_loss(cond, target, gen: Generator, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    ids, tgt, mask = frame_inputs(cond, target, gen)
    return ops.cross_entropy(gen(ids, rng, training), tgt, mask)


def guided_logits(logits_null: np.ndarray, logits_cond: np.ndarray, scale: float) -> np.ndarray:
    return logits_null + scale * (logits_cond - logits_null)


def _softmax(lg: np.ndarray) -> np.ndarray:
    lg = np.asarray(lg, dtype=np.float64)
    lg = lg - lg.max(axis=-1, keepdims=True)
    p = np.exp(lg)
    return p / p.sum(axis=-1, keepdims=True)


def generate_class_conditional(class_id: int, gen: Generator, cfg: CfgConfig, rng: np.random.Generator,
                               num_samples: int = 1) -> np.ndarray:
    """Sample (num_samples, n) token sequences with classifier-free guidance, temperature 1."""
    n = gen.n_tokens
    cls = np.full((num_samples, 1), gen.class_id(class_id), dtype=np.int64)
    null = np.full((num_samples, 1), gen.null_id, dtype=np.int64)
    out = np.zeros((num_samples, 0), dtype=np.int64)
    with no_grad():
        for _ in range(n):
            ids = np.concatenate([np.concatenate([cls, out], 1), np.concatenate([null, out], 1)], axis=0)
            lg = gen(ids).data[:, -1].astype(np.float64)
            guided = guided_logits(lg[num_samples:], lg[:num_samples], cfg.scale)
            nxt = sample_index(_softmax(guided), rng)
            out = np.concatenate([out, nxt[:, None]], axis=1)
    return out


def sample_continuation(prefix: np.ndarray, gen: Generator, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Append ``steps`` sampled tokens to ``prefix`` ids (B, L); return only the new tokens."""
    ids = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
    new = []
    with no_grad():
        for _ in range(steps):
            lg = gen(ids).data[:, -1].astype(np.float64)
            nxt = sample_index(_softmax(lg), rng)
            new.append(nxt)
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
    return np.stack(new, axis=1)


def conditioning_video(clip: np.ndarray, cond_frames: int, total_frames: int) -> np.ndarray:
    """First ``cond_frames`` frames, last one repeated up to ``total_frames``."""
    return repeat_pad(np.asarray(clip)[:cond_frames], total_frames, mode="last")


def predict_frames(cond_clip: np.ndarray, tokenizer, gen: Generator, rng: np.random.Generator):
    """Frame prediction from a T0-frame clip. Returns ``(video, cond_tokens, new_tokens)``."""
    T = tokenizer.cfg.frames
    T0 = cond_clip.shape[0]
    if T0 >= T:
        raise ValueError(f"need fewer than {T} conditioning frames, got {T0}")
    padded = repeat_pad(cond_clip, T, mode="last")
    cond_tokens = tokenizer.tokenize(padded[None])[0]
    prefix = np.concatenate([cond_tokens, [gen.sep_id]])[None]
    new = sample_continuation(prefix, gen, gen.n_tokens, rng)[0]
    return tokenizer.decode(new), cond_tokens, new


def tokenize_corpus(clips, tokenizer, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic token sequences (N, n) and class ids (N,) for labeled clips."""
    videos = np.stack([c.video for c in clips])
    classes = np.array([c.class_id for c in clips], dtype=np.int64)
    return tokenizer.tokenize(videos, batch_size), classes


def frame_corpus(clips, tokenizer, cond_frames: int, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Conditioning tokens (from the padded first ``cond_frames`` frames) and full-clip target tokens."""
    T = tokenizer.cfg.frames
    videos = np.stack([c.video for c in clips])
    padded = np.stack([conditioning_video(v, cond_frames, T) for v in videos])
    return tokenizer.tokenize(padded, batch_size), tokenizer.tokenize(videos, batch_size)
