import math

import numpy as np
import pytest
from conftest import tiny_config
from hypothesis import given
from hypothesis import strategies as st

from larp.numerics import Tensor, ops
from larp.trainer import (Adam, CheckpointError, NumericError, batch_indices, check_compatible, clip_grad_norm,
                          decode_bundle, encode_bundle, full_loss_grad_check, heldout_gen_nll, init_gen_state,
                          init_state, load_checkpoint, load_generator, lr_at, moving_average, read_entries,
                          save_checkpoint, save_generator, train, train_generator, train_step)
from larp.videodata import synth_dataset


def videos(cfg, count=None):
    clips = synth_dataset(cfg.seed, cfg.num_classes, count or cfg.num_clips, (cfg.frames, cfg.height, cfg.width))
    return np.stack([c.video for c in clips])


def params_bytes(state):
    return {k: p.data.tobytes() for k, p in state.named_parameters().items()}


# -- schedule, optimizer, clipping --------------------------------------------------------------


def test_lr_schedule_points():
    assert lr_at(0, 1.0, 100, 2000) == 0.0
    assert lr_at(50, 1.0, 100, 2000) == 0.5
    assert lr_at(100, 1.0, 100, 2000) == 1.0
    assert lr_at(1050, 1.0, 100, 2000) == pytest.approx(0.5, abs=1e-15)
    assert lr_at(2000, 1.0, 100, 2000) == 0.0


@given(st.integers(0, 100), st.integers(101, 3000), st.integers(0, 3000))
def test_lr_schedule_bounded(warm, total, step):
    assert 0.0 <= lr_at(step, 2.0, warm, total) <= 2.0


def test_adam_first_step_matches_hand_value():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0])
    opt = Adam({"w": p})
    opt.step(0.1)
    # bias-corrected first step moves each coordinate by lr * g / (|g| + eps')
    g = np.array([0.5, -4.0])
    expected = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, atol=1e-15)
    assert (opt.beta1, opt.beta2) == (0.9, 0.95)


def test_adam_lr_multiplier_and_decay():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    a.grad = np.ones((2, 2))
    b.grad = np.ones((2, 2))
    Adam({"a": a, "b": b}, lr_mult={"b": 50.0}).step(1e-3)
    np.testing.assert_allclose(1 - a.data, 1e-3, rtol=1e-6)
    np.testing.assert_allclose(1 - b.data, 5e-2, rtol=1e-6)
    c = Tensor(np.ones((2, 2)), requires_grad=True)
    c.grad = np.zeros((2, 2))
    Adam({"c": c}, weight_decay=0.5).step(0.1)
    np.testing.assert_allclose(c.data, 0.95)


def test_prior_gets_fifty_times_lr():
    state = init_state(tiny_config())
    mult = state.optimizer.lr_mult
    assert all(mult[k] == 50.0 for k in state.named_parameters() if k.startswith("prior."))
    assert not any(k.startswith("tok.") for k in mult)


def test_clip_grad_norm():
    ps = [Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)]
    ps[0].grad = np.array([3.0, 0.0])
    ps[1].grad = np.array([4.0])
    assert clip_grad_norm(ps, 1.0) == pytest.approx(5.0)
    total = math.sqrt(sum(float(np.sum(p.grad**2)) for p in ps))
    assert total == pytest.approx(1.0)
    ps[0].grad = np.array([0.3, 0.0])
    ps[1].grad = np.array([0.4])
    clip_grad_norm(ps, 1.0)
    np.testing.assert_array_equal(ps[0].grad, [0.3, 0.0])


def test_batch_indices_cover_each_epoch():
    seen = np.concatenate([batch_indices(3, s, 16, 4) for s in range(4)])
    assert sorted(seen.tolist()) == list(range(16))
    assert batch_indices(3, 5, 16, 4).tolist() == batch_indices(3, 5, 16, 4).tolist()


def test_moving_average():
    np.testing.assert_allclose(moving_average(np.arange(5.0), 2), [0.5, 1.5, 2.5, 3.5])
    assert moving_average([1.0, 3.0], 100).tolist() == [2.0]


# -- training -----------------------------------------------------------------------------------------


def test_training_is_deterministic():
    cfg = tiny_config()
    v = videos(cfg)
    a, b = init_state(cfg), init_state(cfg)
    ma = train(a, v, steps=4)
    mb = train(b, v, steps=4)
    assert [m.csv_row() for m in ma] == [m.csv_row() for m in mb]
    assert params_bytes(a) == params_bytes(b)


def test_step_metrics_and_codebook_norm():
    cfg = tiny_config()
    state = init_state(cfg)
    m = train_step(state, videos(cfg)[:2])
    assert state.step == 1 and m.step == 0 and m.lr == 0.0
    assert m.csv_row().count(",") == 5
    norms = np.linalg.norm(state.tokenizer.quantizer.book.vectors.data, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)


def test_loss_decreases_on_tiny_run():
    cfg = tiny_config(total_steps=60, warmup_steps=5, base_lr=3e-3, num_clips=8)
    state = init_state(cfg)
    ms = train(state, videos(cfg))
    assert np.mean([m.l1 for m in ms[-10:]]) < np.mean([m.l1 for m in ms[:10]])


def test_alpha_zero_leaves_prior_untouched():
    cfg = tiny_config(alpha=0.0)
    state = init_state(cfg)
    before = {k: p.data.copy() for k, p in state.prior.named_parameters()}
    train(state, videos(cfg), steps=3)
    for k, p in state.prior.named_parameters():
        np.testing.assert_array_equal(p.data, before[k])


def test_non_finite_loss_raises():
    cfg = tiny_config()
    state = init_state(cfg)
    bad = videos(cfg)[:2].copy()
    bad[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="step 0"):
        train_step(state, bad)


def test_loss_hook_adds_term():
    cfg = tiny_config()
    state = init_state(cfg)
    hook = ("mean", lambda v, v_hat: ops.mean(v_hat) * 0.0 + 1.0)
    m = train_step(state, videos(cfg)[:2], hooks=[hook])
    plain = train_step(init_state(cfg), videos(cfg)[:2])
    assert m.loss == pytest.approx(plain.loss + 1.0, rel=1e-12)


# -- checkpoints ------------------------------------------------------------------------------------


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = tiny_config()
    v = videos(cfg)
    full = init_state(cfg)
    train(full, v, steps=6)
    part = init_state(cfg)
    train(part, v, steps=3)
    save_checkpoint(part, tmp_path / "ck")
    resumed = load_checkpoint(tmp_path / "ck")
    train(resumed, v, steps=3)
    assert resumed.step == 6
    assert params_bytes(resumed) == params_bytes(full)
    assert list(resumed.history) == list(full.history)


def test_checkpoint_is_byte_stable():
    cfg = tiny_config()
    state = init_state(cfg)
    train(state, videos(cfg), steps=2)
    blob = save_checkpoint(state)
    assert save_checkpoint(load_checkpoint(blob)) == blob


def test_bundle_errors():
    good = encode_bundle({"a": np.ones(3)})
    assert decode_bundle(good)["a"].tolist() == [1.0, 1.0, 1.0]
    with pytest.raises(CheckpointError, match="offset 0"):
        decode_bundle(b"XXXX" + good[4:])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_bundle(good + b"\0")
    with pytest.raises(CheckpointError):
        decode_bundle(good[:-3])
    with pytest.raises(CheckpointError, match="missing tensor"):
        load_checkpoint(encode_bundle({"a": np.ones(1)}))
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint("/nonexistent/ck")


def test_compatibility_check_names_fields(tmp_path):
    state = init_state(tiny_config())
    save_checkpoint(state, tmp_path / "ck")
    entries = read_entries(tmp_path / "ck")
    check_compatible(tiny_config(), entries)
    with pytest.raises(CheckpointError, match="n_tokens: checkpoint 4 vs config 8"):
        check_compatible(tiny_config(n_tokens=8), entries)


def test_full_loss_gradient_check_subsampled():
    errs = full_loss_grad_check(per_tensor=3)
    assert len(errs) > 10
    assert max(e for _, e in errs) < 1e-4


# -- generator training ---------------------------------------------------------------------------------


def corpus(cfg, size=32):
    r = np.random.default_rng(0)
    classes = np.arange(size) % cfg.num_classes
    # each class repeats one fixed sequence, so the generator can memorize it
    base = r.integers(0, cfg.codebook_size, size=(cfg.num_classes, cfg.n_tokens))
    return base[classes], classes


def test_generator_training_lowers_nll_and_resumes():
    cfg = tiny_config(gen_steps=40, gen_lr=3e-3)
    seqs, classes = corpus(cfg)
    state = init_gen_state(cfg)
    start = heldout_gen_nll(state, seqs, classes)
    assert start == pytest.approx(math.log(cfg.codebook_size), abs=0.2)
    train_generator(state, seqs, classes, steps=20)
    blob = save_generator(state)
    resumed = load_generator(blob)
    train_generator(state, seqs, classes)
    train_generator(resumed, seqs, classes)
    assert save_generator(resumed) == save_generator(state)
    assert heldout_gen_nll(state, seqs, classes) < start - 0.5


def test_frame_task_training_runs():
    cfg = tiny_config(gen_task="frame", gen_steps=3)
    seqs, _ = corpus(cfg)
    state = init_gen_state(cfg)
    losses = train_generator(state, seqs, seqs[::-1].copy())
    assert len(losses) == 3 and all(np.isfinite(losses))
    assert state.generator.max_len == 2 * cfg.n_tokens + 1


# -- loss composition and reference checks --------------------------------------------------------------


def _grads(cfg, batch):
    from larp.numerics import stream
    from larp.trainer import total_loss
    state = init_state(cfg)
    state.step = 5
    loss, comp = total_loss(batch, state, stream(0, "loss"))
    loss.backward()
    return state, loss, comp


def test_components_reproduce_total():
    cfg = tiny_config()
    v = videos(cfg)[:2]
    _, loss, comp = _grads(cfg, v)
    assert float(loss.data) == pytest.approx(comp.l1 + comp.svq + cfg.alpha * comp.prior_nll, abs=1e-12)
    _, loss0, comp0 = _grads(tiny_config(alpha=0.0), v)
    assert float(loss0.data) == comp0.l1 + comp0.svq


def test_prior_changes_encoder_gradients():
    v = videos(tiny_config())[:2]
    with_prior, _, _ = _grads(tiny_config(), v)
    without, _, _ = _grads(tiny_config(alpha=0.0), v)
    a = {k: p.grad for k, p in with_prior.tokenizer.encoder.named_parameters()}
    b = {k: p.grad for k, p in without.tokenizer.encoder.named_parameters()}
    assert any(not np.array_equal(a[k], b[k]) for k in a)


def test_adam_matches_scalar_reference():
    p = Tensor(np.array([0.7]), requires_grad=True)
    opt = Adam({"w": p})
    x, m, v = 0.7, 0.0, 0.0
    for t in range(1, 21):
        g = 2 * (x - 0.1) + 0.3 * math.sin(t)
        p.grad = np.array([2 * (p.data[0] - 0.1) + 0.3 * math.sin(t)])
        lr = 0.01 * t / 20
        opt.step(lr)
        m = 0.9 * m + 0.1 * g
        v = 0.95 * v + 0.05 * g * g
        x -= lr * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.95**t)) + 1e-8)
        assert abs(p.data[0] - x) < 1e-12


def test_prior_effective_lr_is_fifty_times_at_every_step():
    cfg = tiny_config()
    state = init_state(cfg)
    seen = []
    orig = state.optimizer.step

    def spy(lr):
        seen.append({k: lr * state.optimizer.lr_mult.get(k, 1.0) for k in ("tok.holistic_queries", "prior.bos_embedding")})
        orig(lr)

    state.optimizer.step = spy
    train(state, videos(cfg), steps=5)
    assert all(s["prior.bos_embedding"] == 50.0 * s["tok.holistic_queries"] for s in seen)


def test_ten_step_replay_from_checkpoint_is_bitwise():
    cfg = tiny_config()
    v = videos(cfg)
    state = init_state(cfg)
    train(state, v, steps=2)
    blob = save_checkpoint(state)
    a, b = load_checkpoint(blob), load_checkpoint(blob)
    train(a, v, steps=10)
    train(b, v, steps=10)
    assert save_checkpoint(a) == save_checkpoint(b)
