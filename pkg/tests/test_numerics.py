import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from larp.numerics import (GradCheckError, ShapeError, Tensor, Transformer, forward_op, grad_check, graph_nodes,
                           no_grad, ops, precision, sincos_1d, sincos_3d, stream)
from larp.numerics.dtio import FormatError, decode_tensor, encode_tensor, load_tensor, save_tensor, write_tensor
from larp.numerics.gradcheck import operator_suite
from larp.numerics.rng import split

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def vec(n_lo=1, n_hi=8):
    return hnp.arrays(np.float64, st.integers(n_lo, n_hi), elements=finite)


# -- forward operators ---------------------------------------------------------------


def test_softmax_uniform_on_zeros():
    p = ops.softmax(Tensor([0.0, 0.0, 0.0])).data
    np.testing.assert_allclose(p, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_temperature_hand_value():
    p = ops.softmax(Tensor([2.0, 1.0]), temperature=0.5).data
    e4, e2 = np.exp(4.0), np.exp(2.0)
    np.testing.assert_allclose(p, [e4 / (e4 + e2), e2 / (e4 + e2)], atol=1e-15)
    np.testing.assert_allclose(np.round(p, 4), [0.8808, 0.1192])


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 5))
    out = ops.matmul(Tensor(np.eye(3)), Tensor(a)).data
    np.testing.assert_array_equal(out, a)


def test_forward_op_dispatch_and_unknown():
    out = forward_op("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])
    with pytest.raises(ValueError, match="unknown operator"):
        forward_op("nope", Tensor([1.0]))


@pytest.mark.parametrize("fn, a, b", [
    (ops.add, (3, 4), (5, 4)),
    (ops.matmul, (3, 4), (5, 6)),
    (ops.l1_distance, (3, 4), (4, 3)),
    (ops.cosine_similarity, (3, 4), (5, 3)),
])
def test_shape_mismatch_names_both_shapes(fn, a, b):
    with pytest.raises(ShapeError) as err:
        fn(Tensor(np.zeros(a)), Tensor(np.zeros(b)))
    assert str(a) in str(err.value) and str(b) in str(err.value)


def test_gelu_matches_tanh_form():
    x = np.linspace(-6, 6, 101)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(ops.gelu(Tensor(x)).data, ref, atol=1e-14)


def test_layernorm_against_direct_formula():
    x = np.random.default_rng(3).normal(size=(4, 7))
    w, b = np.linspace(0.5, 1.5, 7), np.linspace(-1, 1, 7)
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * w + b
    np.testing.assert_allclose(ops.layernorm(Tensor(x), Tensor(w), Tensor(b)).data, ref, atol=1e-12)


def test_attention_against_direct_formula():
    r = np.random.default_rng(4)
    q, k, v = r.normal(size=(2, 5, 3)), r.normal(size=(2, 6, 3)), r.normal(size=(2, 6, 4))
    s = q @ k.transpose(0, 2, 1) / np.sqrt(3)
    p = np.exp(s - s.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    np.testing.assert_allclose(ops.attention(Tensor(q), Tensor(k), Tensor(v)).data, p @ v, atol=1e-12)


def test_cross_entropy_mask_restricts_average():
    logits = np.random.default_rng(5).normal(size=(3, 4))
    tgt = np.array([0, 3, 1])
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    full = ops.cross_entropy(Tensor(logits), tgt).data
    masked = ops.cross_entropy(Tensor(logits), tgt, np.array([1, 0, 1])).data
    assert full == pytest.approx(-lp[[0, 1, 2], tgt].mean(), abs=1e-14)
    assert masked == pytest.approx(-(lp[0, 0] + lp[2, 1]) / 2, abs=1e-14)


def test_sincos_tables():
    t = sincos_1d(5, 8)
    assert t.shape == (5, 8)
    np.testing.assert_array_equal(t[0], [0, 0, 0, 0, 1, 1, 1, 1])
    t3 = sincos_3d((2, 3, 4), 12)
    assert t3.shape == (24, 12)
    # deterministic and rows are distinct positions
    np.testing.assert_array_equal(t3, sincos_3d((2, 3, 4), 12))
    assert len({r.tobytes() for r in t3}) == 24
    with pytest.raises(ValueError):
        sincos_1d(3, 7)


# -- backward --------------------------------------------------------------------------


def test_backward_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    ops.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_half_square_norm_is_identity():
    data = np.random.default_rng(1).normal(size=(5, 2))
    x = Tensor(data, requires_grad=True)
    (ops.sum(ops.square(x)) * 0.5).backward()
    np.testing.assert_allclose(x.grad, data, atol=1e-15)


def test_cross_entropy_gradient_is_p_minus_onehot():
    logits = np.array([0.3, -1.2, 2.0, 0.5])
    x = Tensor(logits, requires_grad=True)
    ops.cross_entropy(x.reshape(1, 4), np.array([2])).backward()
    p = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(x.grad, p - np.eye(4)[2], atol=1e-14)
    # and the finite-difference checker agrees
    err = grad_check(lambda t: ops.cross_entropy(t.reshape(1, 4), np.array([2])), Tensor(logits.copy()))
    assert err < 1e-8


def test_backward_rejects_non_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_backward_accumulates_and_reset_reproduces():
    r = np.random.default_rng(2)
    x = Tensor(r.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(r.normal(size=(4, 2)), requires_grad=True)
    root = ops.sum(ops.gelu(x @ w))
    root.backward()
    first = x.grad.copy()
    root.backward()
    np.testing.assert_allclose(x.grad, 2 * first, rtol=1e-15)
    x.zero_grad()
    w.zero_grad()
    root.backward()
    np.testing.assert_array_equal(x.grad, first)


def test_graph_is_topological_and_visits_each_node_once():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    z = y + y * 3.0
    root = ops.sum(z)
    nodes = graph_nodes(root)
    assert len({id(n) for n in nodes}) == len(nodes)
    pos = {id(n): i for i, n in enumerate(nodes)}
    for n in nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    root.backward()
    np.testing.assert_array_equal(x.grad, [8.0, 8.0, 8.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = ops.sum(x * 2.0)
    assert not y.requires_grad and y.is_leaf


def test_precision_context_sets_dtype():
    with precision("float32"):
        assert Tensor([1.0]).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


# -- gradient checker -----------------------------------------------------------------


def test_grad_check_of_sum_is_exact():
    # dyadic inputs and step make the central difference free of rounding
    x = Tensor(np.arange(9.0).reshape(3, 3) / 4)
    assert grad_check(ops.sum, x, h=2.0**-16) == 0.0
    assert grad_check(ops.sum, Tensor(np.random.default_rng(0).normal(size=(3, 3)))) < 1e-9


def test_grad_check_half_square_norm():
    x = Tensor(np.random.default_rng(1).normal(size=(6,)))
    assert grad_check(lambda t: ops.sum(ops.square(t)) * 0.5, x, h=1e-5) < 1e-6


@pytest.mark.filterwarnings("ignore:invalid value encountered in log")
def test_grad_check_reports_nan_with_index():
    # only the perturbation of element 1 leaves the log domain
    x = Tensor(np.array([1.0, 5e-6, 2.0]))
    with pytest.raises(GradCheckError, match="element 1"):
        grad_check(lambda t: ops.sum(ops.log(t)), x)


def test_grad_check_restores_input():
    data = np.random.default_rng(2).normal(size=(4,))
    x = Tensor(data.copy())
    grad_check(lambda t: ops.sum(ops.exp(t)), x)
    np.testing.assert_array_equal(x.data, data)


def test_operator_suite_all_below_tolerance():
    results = operator_suite(seed=3)
    assert len(results) >= 25
    for name, err in results:
        assert err < 1e-6, name


@pytest.mark.parametrize("seed", range(20))
def test_operators_on_random_shapes(seed):
    # twenty independent shape/input draws per operator family
    r = stream(seed, "shapes")
    a, b, c = (int(v) for v in r.integers(1, 5, size=3))
    x = Tensor(r.normal(size=(a, b)))
    y = Tensor(r.normal(size=(b, c)))
    w = Tensor(r.normal(size=(a, b)))
    checks = [
        grad_check(lambda t: ops.sum(ops.matmul(t, y) * w.data.sum()), x),
        grad_check(lambda t: ops.sum(ops.softmax(t, temperature=0.7) * w), x),
        grad_check(lambda t: ops.sum(ops.gelu(t) * w), x),
        grad_check(lambda t: ops.sum(ops.layernorm(t, Tensor(np.ones(b)), Tensor(np.zeros(b))) * w), x)
        if b > 1 else 0.0,
        grad_check(lambda t: ops.sum(ops.normalize(t) * w), x),
        grad_check(lambda t: ops.sum(ops.attention(t, t, t, causal=True) * w), x),
    ]
    assert max(checks) < 1e-4


# -- properties -------------------------------------------------------------------------


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=finite),
       st.floats(0.05, 5.0))
def test_softmax_sums_to_one_and_positive(x, temp):
    p = ops.softmax(Tensor(x), temperature=temp).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-10)
    assert np.all(p > 0)


@given(st.integers(2, 7), st.integers(0, 10_000))
def test_causal_attention_row_invariance(L, seed):
    r = np.random.default_rng(seed)
    q, k, v = (r.normal(size=(2, L, 3)) for _ in range(3))
    i = int(r.integers(0, L - 1))
    base = ops.attention(Tensor(q), Tensor(k), Tensor(v), causal=True).data
    q2, k2, v2 = q.copy(), k.copy(), v.copy()
    for arr in (q2, k2, v2):
        arr[:, i + 1:] += r.normal(size=arr[:, i + 1:].shape)
    out = ops.attention(Tensor(q2), Tensor(k2), Tensor(v2), causal=True).data
    np.testing.assert_array_equal(out[:, : i + 1], base[:, : i + 1])


def test_causal_transformer_prefix_invariance():
    r = np.random.default_rng(0)
    tr = Transformer(r, 8, 2, 2, causal=True)
    x = r.normal(size=(1, 6, 8))
    base = tr(Tensor(x)).data
    x2 = x.copy()
    x2[:, 4:] = r.normal(size=(1, 2, 8))
    np.testing.assert_array_equal(tr(Tensor(x2)).data[:, :4], base[:, :4])


def test_transformer_keep_equals_slice():
    r = np.random.default_rng(1)
    tr = Transformer(r, 8, 2, 2)
    x = Tensor(r.normal(size=(2, 7, 8)))
    np.testing.assert_allclose(tr(x, keep=3).data, tr(x).data[:, :3], atol=1e-12)


@given(vec())
def test_forward_ops_stay_finite(x):
    t = Tensor(x)
    for out in (ops.gelu(t), ops.softmax(t), ops.exp(ops.clamp(t, -5, 5)), ops.normalize(t.reshape(1, -1))):
        assert np.all(np.isfinite(out.data))


# -- rng ------------------------------------------------------------------------------------


def test_streams_are_reproducible_and_independent():
    a = stream(3, "x", 1).random(5)
    np.testing.assert_array_equal(a, stream(3, "x", 1).random(5))
    assert not np.array_equal(a, stream(3, "x", 2).random(5))
    assert not np.array_equal(a, stream(4, "x", 1).random(5))
    kids = split(stream(0), 3)
    assert len({k.random() for k in kids}) == 3
    with pytest.raises(ValueError):
        stream(0, -1)


# -- DT01 ------------------------------------------------------------------------------------


def test_dt01_layout():
    arr = np.arange(6, dtype=np.float64).reshape(2, 3)
    buf = encode_tensor(arr)
    assert buf[:4] == b"DT01" and buf[4] == 2
    assert buf[5:13] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert buf[13:] == arr.astype("<f8").tobytes()


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4),
                  elements=st.floats(allow_nan=False)))
def test_dt01_round_trip(arr):
    out, end = decode_tensor(encode_tensor(arr))
    assert end == len(encode_tensor(arr))
    np.testing.assert_array_equal(out, arr)


def test_dt01_errors_carry_offsets(tmp_path):
    buf = encode_tensor(np.ones((2, 2)))
    with pytest.raises(FormatError, match="offset 0"):
        decode_tensor(b"XX01" + buf[4:])
    with pytest.raises(FormatError, match="offset 13"):
        decode_tensor(buf[:-3])
    p = tmp_path / "t.dt"
    p.write_bytes(buf + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_tensor(p)
    save_tensor(p, np.eye(2))
    np.testing.assert_array_equal(load_tensor(p), np.eye(2))
    s = io.BytesIO()
    write_tensor(s, np.eye(2))
    assert s.getvalue() == p.read_bytes()
