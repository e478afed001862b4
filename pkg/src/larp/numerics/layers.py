"""Parameter containers and pre-LN transformer blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype


class Module:
    """Attribute-walking parameter container.

    Parameters are the ``requires_grad`` tensors reachable through
    attributes, nested modules and lists of modules. Names are dotted paths.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in state]
        if missing:
            raise KeyError(f"missing tensor {missing[0]!r}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"tensor {k!r}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def init_normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(default_dtype()), requires_grad=True)


def init_const(shape, value: float) -> Tensor:
    return Tensor(np.full(shape, value, dtype=default_dtype()), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, std: float | None = None):
        self.w = init_normal(rng, (d_in, d_out), std if std is not None else 1.0 / math.sqrt(d_in))
        self.b = init_const((d_out,), 0.0) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.weight = init_const((d,), 1.0)
        self.bias = init_const((d,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.weight, self.bias)


class Block(Module):
    """Pre-LN transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, rng: np.random.Generator, d: int, heads: int, mlp_ratio: int = 4, causal: bool = False,
                 depth_scale: float = 1.0, fan_in_init: bool = False):
        """``fan_in_init`` draws weights with std 1/sqrt(fan_in) instead of the small 0.02 default."""
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.causal = causal
        hid = mlp_ratio * d
        std_in, std_hid = (d**-0.5, hid**-0.5) if fan_in_init else (0.02, 0.02)
        if fan_in_init:
            depth_scale = 1.0
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(rng, d, 3 * d, std=std_in)
        self.proj = Linear(rng, d, d, std=std_in * depth_scale)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(rng, d, hid, std=std_in)
        self.fc2 = Linear(rng, hid, d, std=std_hid * depth_scale)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None, resid_drop: float = 0.0,
                 ff_drop: float = 0.0, training: bool = False, keep: int | None = None) -> Tensor:
        """``keep`` limits the output to the first ``keep`` rows (they still attend to every row)."""
        B, L, d = x.shape
        h = self.heads
        qkv = self.qkv(self.ln1(x)).reshape(B, L, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q = qkv[0]
        if keep is not None and keep < L:
            if self.causal:
                raise ValueError("row truncation is only supported for bidirectional blocks")
            q, x, L = q[:, :, :keep], x[:, :keep], keep
        att = ops.attention(q, qkv[1], qkv[2], causal=self.causal)
        att = att.transpose(0, 2, 1, 3).reshape(B, L, d)
        x = x + ops.dropout(self.proj(att), resid_drop, rng, training)
        hid = ops.dropout(ops.gelu(self.fc1(self.ln2(x))), ff_drop, rng, training)
        return x + ops.dropout(self.fc2(hid), resid_drop, rng, training)


class Transformer(Module):
    """Stack of pre-LN blocks followed by a final LayerNorm."""

    def __init__(self, rng: np.random.Generator, d: int, depth: int, heads: int, causal: bool = False,
                 mlp_ratio: int = 4, fan_in_init: bool = False):
        scale = 1.0 / math.sqrt(2 * depth)
        self.blocks = [Block(rng, d, heads, mlp_ratio=mlp_ratio, causal=causal, depth_scale=scale,
                             fan_in_init=fan_in_init) for _ in range(depth)]
        self.ln_f = LayerNorm(d)

    def __call__(self, x: Tensor, keep: int | None = None, **kw) -> Tensor:
        """Run every block; with ``keep``, only the first ``keep`` rows are returned.

        The truncation happens inside the last block, so the result equals
        running the full stack and slicing afterwards.
        """
        last = len(self.blocks) - 1
        for i, blk in enumerate(self.blocks):
            x = blk(x, keep=keep if i == last else None, **kw)
        if keep is not None and not self.blocks:
            x = x[:, :keep]
        return self.ln_f(x)


def sincos_1d(length: int, d: int) -> np.ndarray:
    """Fixed sin-cos table of shape (length, d)."""
    return _sincos(np.arange(length, dtype=np.float64), d)


def _sincos(pos: np.ndarray, d: int) -> np.ndarray:
    if d % 2:
        raise ValueError(f"sin-cos width must be even, got {d}")
    omega = 1.0 / 10000.0 ** (np.arange(d // 2, dtype=np.float64) / (d / 2))
    ang = np.outer(pos, omega)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def sincos_3d(grid: tuple[int, int, int], d: int) -> np.ndarray:
    """Fixed 3-D sin-cos table for a (t, h, w) grid flattened time-major.

    The width is split into three even chunks, one per axis.
    """
    if d % 2:
        raise ValueError(f"sin-cos width must be even, got {d}")
    dt = dh = 2 * (d // 6)
    dw = d - dt - dh
    t, h, w = grid
    tt, hh, ww = np.meshgrid(np.arange(t), np.arange(h), np.arange(w), indexing="ij")
    return np.concatenate(
        [_sincos(tt.reshape(-1).astype(np.float64), dt),
         _sincos(hh.reshape(-1).astype(np.float64), dh),
         _sincos(ww.reshape(-1).astype(np.float64), dw)],
        axis=1,
    )
