"""Differentiable operators over :class:`Tensor`.

Each function computes the forward value with numpy and registers a closure
returning one gradient per parent. Transformer building blocks (layernorm,
attention, gelu, cross-entropy) are fused into single nodes; composing them
from primitives would multiply both graph size and memory traffic.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, default_dtype


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def abs(x: Tensor) -> Tensor:  # noqa: A001
    return Tensor._make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def square(x: Tensor) -> Tensor:
    return Tensor._make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation, evaluated as x * sigmoid(2u) with u = c(x + 0.044715 x^3)."""
    c = math.sqrt(2.0 / math.pi)
    xd = x.data
    x2 = xd * xd
    u = (1.0 + 0.044715 * x2) * xd
    u *= -2.0 * c
    with np.errstate(over="ignore"):
        np.exp(u, out=u)
    u += 1.0
    sig = np.reciprocal(u, out=u)  # 0.5 * (1 + tanh)
    out = xd * sig

    def backward(g):
        # d/dx = sig + x * 2 sig (1 - sig) * c (1 + 3 * 0.044715 x^2)
        d = (1.0 - sig) * sig
        d *= (2.0 * c) * (1.0 + 3 * 0.044715 * x2) * xd
        d += sig
        d *= g
        return (d,)

    return Tensor._make(out, (x,), backward, "gelu")


# -- reductions and shape ops -------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return Tensor._make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs, axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape} along axis {axis}")
    out = np.concatenate([x.data for x in xs], axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs))
        )

    return Tensor._make(out, xs, backward, "concat")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return Tensor._make(
        np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast"
    )


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return Tensor._make(np.array(out), (x,), backward, "getitem")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def take_rows(table: Tensor, index) -> Tensor:
    """Embedding lookup: ``table[index]`` for an integer index array."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"take_rows: index out of range [0, {table.shape[0]})")
    out = table.data[index]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (full,)

    return Tensor._make(out, (table,), backward, "take_rows")


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[-2] if b.ndim > 1 else b.shape[0]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        ad, bd = a.data, b.data
        if b.ndim == 1:
            if a.requires_grad:
                ga = np.multiply.outer(g, bd)
            if b.requires_grad:
                gb = (ad * g[..., None]).reshape(-1, bd.shape[0]).sum(axis=0)
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if a.ndim > 1 else g @ bd.T
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(ad, g)
            elif b.ndim == 2 and a.ndim > 2:
                # weight shared across the batch: fold batch dims into rows
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for x (..., d_in), w (d_in, d_out), b (d_out,), as one graph node."""
    x, w = _lift(x), _lift(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b is not None and tuple(b.shape) != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match output width {w.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(*lead, w.shape[1])

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, backward, "linear")


# -- normalisation and softmax family -----------------------------------------


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if temperature <= 0:
        raise ValueError("softmax temperature must be positive")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((p * (g - (g * p).sum(axis=axis, keepdims=True))) / temperature,)

    return Tensor._make(p, (x,), backward, "softmax")


def log_softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return Tensor._make(out, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits).

    ``mask`` (same shape as targets, 0/1) restricts the average to selected
    positions.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    w = np.ones(targets.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    denom = max(float(w.sum()), 1.0)
    out = np.asarray(-(picked * w).sum() / denom, dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (w / denom)[..., None] * g,)

    return Tensor._make(out, (logits,), backward, "cross_entropy")


def _row_mean(a: np.ndarray) -> np.ndarray:
    # mean over the last axis as a matrix-vector product (much faster than a strided reduce)
    return a @ np.full((a.shape[-1], 1), 1.0 / a.shape[-1], dtype=a.dtype)


def _row_dot_mean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", a, b)[..., None] / a.shape[-1]


def layernorm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    xc = xd - _row_mean(xd)
    rstd = 1.0 / np.sqrt(_row_dot_mean(xc, xc) + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data
    d = xd.shape[-1]

    def backward(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0) if weight.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * weight.data
            gx = gh - _row_mean(gh)
            gx -= xhat * _row_dot_mean(gh, xhat)
            gx *= rstd
        return gx, gw, gb

    return Tensor._make(out, (x, weight, bias), backward, "layernorm")


def normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Unit-norm rows: x / ||x||."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._make(out, (x,), backward, "normalize")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity of rows of ``a`` (..., d) against rows of ``b`` (c, d)."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity: incompatible shapes {a.shape} and {b.shape}")
    return matmul(normalize(a), transpose(normalize(b)))


def l1_distance(a, b) -> Tensor:
    """Mean absolute difference."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    n = diff.size
    sgn = np.sign(diff)

    def backward(g):
        return g * sgn / n, -g * sgn / n

    return Tensor._make(np.asarray(np.abs(diff).mean()), (a, b), backward, "l1")


# -- attention ----------------------------------------------------------------


_CAUSAL_BIAS: dict[tuple[int, str], np.ndarray] = {}


def _causal_bias(L: int, dtype) -> np.ndarray:
    key = (L, np.dtype(dtype).str)
    if key not in _CAUSAL_BIAS:
        _CAUSAL_BIAS[key] = np.where(np.triu(np.ones((L, L), dtype=bool), k=1), -np.inf, 0.0).astype(dtype)
    return _CAUSAL_BIAS[key]


def _slabs(count: int, block: int, budget: int = 1 << 18) -> list[slice]:
    """Split ``count`` score blocks of ``block`` elements into slabs of about ``budget`` elements."""
    step = max(1, budget // max(block, 1))
    return [slice(i, i + step) for i in range(0, count, step)]


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """Scaled dot-product attention: q (..., Lq, dh) over k, v (..., Lk, dh).

    With ``causal`` set (requires Lq == Lk), position i attends to positions <= i only.
    """
    if q.shape[:-2] != k.shape[:-2] or q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    if causal and q.shape[-2] != k.shape[-2]:
        raise ShapeError(f"attention: causal mask needs equal query/key lengths, got q{q.shape} k{k.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    lead = q.shape[:-2]
    Lq, Lk, dh = q.shape[-2], k.shape[-2], q.shape[-1]
    # flatten leading dims and work in slabs small enough for the score block to stay in cache
    qd = np.ascontiguousarray(q.data).reshape(-1, Lq, dh)
    kd = np.ascontiguousarray(k.data).reshape(-1, Lk, dh)
    vd = np.ascontiguousarray(v.data).reshape(-1, Lk, v.shape[-1])
    slabs = _slabs(qd.shape[0], Lq * Lk)
    p = np.empty((qd.shape[0], Lq, Lk), dtype=np.result_type(qd, kd))
    o = np.empty((qd.shape[0], Lq, vd.shape[-1]), dtype=p.dtype)
    for s in slabs:
        ps = np.matmul(qd[s] * scale, np.swapaxes(kd[s], -1, -2), out=p[s])
        if causal:
            ps += _causal_bias(Lq, ps.dtype)
        ps -= ps.max(axis=-1, keepdims=True)
        np.exp(ps, out=ps)
        ps /= ps.sum(axis=-1, keepdims=True)
        np.matmul(ps, vd[s], out=o[s])

    def backward(g):
        g = np.ascontiguousarray(g).reshape(o.shape)
        gq, gk, gv = np.empty_like(qd), np.empty_like(kd), np.empty_like(vd)
        for s in slabs:
            gb, ps = g[s], p[s]
            np.matmul(np.swapaxes(ps, -1, -2), gb, out=gv[s])
            # row sums of p * (g v^T) equal the row dot products g . out
            gp = gb @ np.swapaxes(vd[s], -1, -2)
            gp -= np.sum(gb * o[s], axis=-1, keepdims=True)
            gp *= ps
            gp *= scale
            np.matmul(gp, kd[s], out=gq[s])
            np.matmul(np.swapaxes(gp, -1, -2), qd[s], out=gk[s])
        return gq.reshape(q.shape), gk.reshape(k.shape), gv.reshape(v.shape)

    return Tensor._make(o.reshape(*lead, Lq, vd.shape[-1]), (q, k, v), backward, "attention")


# -- stochastic / gradient-routing ops ----------------------------------------


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def stop_gradient(x: Tensor) -> Tensor:
    return x.detach()


def straight_through(x: Tensor, value) -> Tensor:
    """Forward ``value``, backward identity to ``x``."""
    value = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=x.dtype)
    if value.shape != x.shape:
        raise ShapeError(f"straight_through: incompatible shapes {x.shape} and {value.shape}")
    return Tensor._make(value.copy(), (x,), lambda g: (g,), "straight_through")


OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "abs": abs,
    "square": square,
    "clamp": clamp,
    "gelu": gelu,
    "sum": sum,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "matmul": matmul,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "cross_entropy": cross_entropy,
    "layernorm": layernorm,
    "normalize": normalize,
    "cosine_similarity": cosine_similarity,
    "l1": l1_distance,
    "attention": attention,
    "take_rows": take_rows,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch an operator by tag name."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operator {kind!r}") from None
    return fn(*inputs, **attrs)
