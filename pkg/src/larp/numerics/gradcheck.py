"""Central-difference gradient checker."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


class GradCheckError(ArithmeticError):
    pass


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, indices=None) -> float:
    """Max relative error between the analytic and numeric gradient of ``f`` at ``x``.

    The error for one element is ``|analytic - numeric| / max(1, |numeric|)``.
    ``f`` must map ``x`` to a scalar tensor. ``x.data`` is perturbed in place
    and restored. ``indices`` restricts the comparison to those flat elements.
    """
    x.requires_grad = True
    x.grad = None
    root = f(x)
    if root.size != 1:
        raise GradCheckError(f"grad_check needs a scalar function, got shape {root.shape}")
    root.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=np.int64).reshape(-1)
    numeric = np.empty(idx.size, dtype=flat.dtype)
    with no_grad():
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            numeric[j] = (fp - fm) / (2.0 * h)
            if not np.isfinite(numeric[j]):
                raise GradCheckError(f"non-finite numeric gradient at element {i}")
    a = analytic.reshape(-1)[idx]
    bad = np.flatnonzero(~np.isfinite(a))
    if bad.size:
        raise GradCheckError(f"non-finite analytic gradient at element {int(idx[bad[0]])}")
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(numeric)))) if a.size else 0.0


def grad_check_many(f: Callable[..., Tensor], inputs: list[Tensor], h: float = 1e-5) -> float:
    """Worst :func:`grad_check` error over several inputs of a multi-argument ``f``."""
    worst = 0.0
    for i, x in enumerate(inputs):
        others = list(inputs)

        def fi(t, i=i):
            others[i] = t
            return f(*others)

        worst = max(worst, grad_check(fi, x, h))
    return worst


def _weighted_sum(y: Tensor, rng: np.random.Generator) -> Tensor:
    # a random projection avoids accidental cancellations in plain sums
    from . import ops
    return ops.sum(y * Tensor(rng.normal(size=y.shape)))


def operator_suite(seed: int = 0, h: float = 1e-5) -> list[tuple[str, float]]:
    """Worst relative error for every registered operator on random 64-bit inputs."""
    from . import ops
    from .rng import stream
    from .tensor import precision

    out = []
    with precision("float64"):
        def run(name, make_inputs, fn):
            rng = stream(seed, "gradcheck", name)
            xs = [Tensor(a) for a in make_inputs(rng)]
            wrng_seed = int(rng.integers(2**31))
            out.append((name, grad_check_many(
                lambda *t: _weighted_sum(fn(*t), np.random.default_rng(wrng_seed)), xs, h)))

        def away(rng, shape, lo=0.1):
            # values bounded away from zero (kinks, poles, log domain)
            return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.5, size=shape)

        n = lambda rng, *s: rng.normal(size=s)  # noqa: E731
        run("add", lambda r: [n(r, 3, 4), n(r, 4)], ops.add)
        run("sub", lambda r: [n(r, 3, 1), n(r, 3, 4)], ops.sub)
        run("mul", lambda r: [n(r, 3, 4), n(r, 1, 4)], ops.mul)
        run("div", lambda r: [n(r, 3, 4), away(r, (3, 4))], ops.div)
        run("exp", lambda r: [n(r, 5)], ops.exp)
        run("log", lambda r: [np.abs(away(r, (5,)))], ops.log)
        run("abs", lambda r: [away(r, (6,))], ops.abs)
        run("square", lambda r: [n(r, 6)], ops.square)
        run("clamp", lambda r: [r.uniform(-1, 2, size=8)], lambda x: ops.clamp(x, 0.0, 1.0))
        run("gelu", lambda r: [3 * n(r, 10)], ops.gelu)
        run("sum", lambda r: [n(r, 2, 3, 4)], lambda x: ops.sum(x, axis=1))
        run("mean", lambda r: [n(r, 2, 3, 4)], lambda x: ops.mean(x, axis=(0, 2)))
        run("reshape", lambda r: [n(r, 2, 6)], lambda x: ops.reshape(x, (3, 4)))
        run("transpose", lambda r: [n(r, 2, 3, 4)], lambda x: ops.transpose(x, (2, 0, 1)))
        run("concat", lambda r: [n(r, 2, 3), n(r, 4, 3)], lambda a, b: ops.concat([a, b], axis=0))
        run("broadcast_to", lambda r: [n(r, 1, 3)], lambda x: ops.broadcast_to(x, (4, 3)))
        run("getitem", lambda r: [n(r, 5, 4)], lambda x: x[1:4, ::2])
        run("take_rows", lambda r: [n(r, 5, 3)], lambda t: ops.take_rows(t, np.array([[0, 4], [4, 2]])))
        run("matmul", lambda r: [n(r, 2, 3, 4), n(r, 4, 5)], ops.matmul)
        run("linear", lambda r: [n(r, 2, 3, 4), n(r, 4, 5), n(r, 5)], ops.linear)
        run("softmax", lambda r: [n(r, 3, 5)], lambda x: ops.softmax(x, temperature=0.5))
        run("log_softmax", lambda r: [n(r, 3, 5)], lambda x: ops.log_softmax(x, temperature=2.0))
        run("cross_entropy", lambda r: [n(r, 2, 3, 6)],
            lambda x: ops.cross_entropy(x, np.array([[0, 5, 2], [1, 1, 3]]), np.array([[1, 0, 1], [1, 1, 0]])))
        run("layernorm", lambda r: [n(r, 3, 6), 1 + 0.1 * n(r, 6), n(r, 6)], ops.layernorm)
        run("normalize", lambda r: [n(r, 4, 3)], ops.normalize)
        run("cosine_similarity", lambda r: [n(r, 2, 3, 4), n(r, 5, 4)], ops.cosine_similarity)
        run("l1", lambda r: [n(r, 3, 4), n(r, 3, 4) + 3.0], ops.l1_distance)
        run("attention", lambda r: [n(r, 2, 2, 4, 3), n(r, 2, 2, 4, 3), n(r, 2, 2, 4, 3)], ops.attention)
        run("attention_causal", lambda r: [n(r, 2, 5, 3), n(r, 2, 5, 3), n(r, 2, 5, 2)],
            lambda q, k, v: ops.attention(q, k, v, causal=True))
        run("dropout", lambda r: [n(r, 4, 5)],
            lambda x: ops.dropout(x, 0.3, np.random.default_rng(7), training=True))
        # the forward value tracks x here, so the identity backward is also the true derivative
        run("straight_through", lambda r: [n(r, 4, 3)], lambda x: ops.straight_through(x, x.data) * x)
    return out
