"""Joint tokenizer + prior training, Adam, schedules and CK01 checkpoints."""

from __future__ import annotations

import io
import math
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig
from .numerics import Module, Tensor, grad_check, no_grad, ops, precision, stream
from .numerics.dtio import FormatError, decode_tensor, encode_tensor
from .generator import CfgConfig, Generator, frame_loss, gen_loss
from .prior import PriorModel, prior_loss
from .tokenizer import Tokenizer
from .videodata import hflip


class NumericError(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


# -- schedules and optimizer ------------------------------------------------------------


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warm-up from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    span = total_steps - warmup_steps
    if span <= 0:
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))


class Adam:
    """Adam with per-parameter learning-rate multipliers and optional decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8,
                 lr_mult: dict[str, float] | None = None, weight_decay: float = 0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.lr_mult = lr_mult or {}
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            plr = lr * self.lr_mult.get(k, 1.0)
            if self.weight_decay and p.ndim >= 2:
                p.data -= plr * self.weight_decay * p.data
            p.data -= plr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def reset_rows(self, name: str, rows: np.ndarray) -> None:
        self.m[name][rows] = 0.0
        self.v[name][rows] = 0.0


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


# -- state ------------------------------------------------------------------------------------


LossHook = Callable[[np.ndarray, Tensor], Tensor]


@dataclass
class TrainState:
    cfg: RunConfig
    tokenizer: Tokenizer
    prior: PriorModel
    optimizer: Adam
    step: int = 0
    history: deque = field(default_factory=lambda: deque(maxlen=1000))

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"tok.{k}": v for k, v in self.tokenizer.named_parameters()}
        out.update({f"prior.{k}": v for k, v in self.prior.named_parameters()})
        return out


def build_models(cfg: RunConfig) -> tuple[Tokenizer, PriorModel]:
    with precision(cfg.precision):
        rng = stream(cfg.seed, "init")
        tok = Tokenizer(rng, cfg.tokenizer_config(), cfg.quantizer_config())
        prior = PriorModel(rng, cfg.d, cfg.code_dim, cfg.n_tokens, cfg.prior_config())
    return tok, prior


def init_state(cfg: RunConfig) -> TrainState:
    tok, prior = build_models(cfg)
    state = TrainState(cfg, tok, prior, optimizer=None)  # type: ignore[arg-type]
    params = state.named_parameters()
    mult = {k: cfg.prior_lr_mult for k in params if k.startswith("prior.")}
    state.optimizer = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps, lr_mult=mult)
    return state


# -- loss and step ---------------------------------------------------------------------------------


@dataclass
class LossComponents:
    l1: float
    svq: float
    prior_nll: float
    extra: dict[str, float] = field(default_factory=dict)
    tokens: np.ndarray | None = None

    @property
    def rec(self) -> float:
        return self.l1 + self.svq + sum(self.extra.values())


def total_loss(batch: np.ndarray, state: TrainState, rng: np.random.Generator,
               hooks: list[tuple[str, LossHook]] | None = None) -> tuple[Tensor, LossComponents]:
    """``L = (l1_weight * L1 + svq) + alpha * prior_nll``, each term batch-averaged.

    ``hooks`` add further reconstruction terms (name, fn(batch, v_hat) -> scalar).
    """
    cfg = state.cfg
    tok, prior = state.tokenizer, state.prior
    v = np.asarray(batch)
    tokens, latents, svq = tok.encode(v, rng)
    v_hat = tok.decode_latents(latents)
    l1 = ops.l1_distance(v_hat, Tensor(v, dtype=v_hat.dtype))
    rec = l1 * cfg.l1_weight + svq
    extra = {}
    for name, fn in hooks or []:
        term = fn(v, v_hat)
        extra[name] = float(term.data)
        rec = rec + term
    if cfg.alpha > 0:
        pl = prior_loss(tokens, latents, tok.quantizer, prior, state.step, cfg.schedule(), rng)
        total = rec + pl.loss * cfg.alpha
        nll = float(pl.loss.data)
    else:
        with no_grad():
            pl = prior_loss(tokens, latents.detach(), tok.quantizer, prior, state.step, cfg.schedule(), rng)
        total = rec
        nll = float(pl.loss.data)
    return total, LossComponents(float(l1.data), float(svq.data), nll, extra, tokens)


@dataclass
class StepMetrics:
    step: int
    lr: float
    loss: float
    l1: float
    svq: float
    prior_nll: float
    grad_norm: float

    CSV_HEADER = "step,lr,L,L1,svq,prior_nll"

    def csv_row(self) -> str:
        return f"{self.step},{self.lr:.9g},{self.loss:.9g},{self.l1:.9g},{self.svq:.9g},{self.prior_nll:.9g}"


def train_step(state: TrainState, batch: np.ndarray, hooks=None) -> StepMetrics:
    """One optimizer update on ``batch`` (B, T, H, W, 3); advances ``state.step``."""
    cfg = state.cfg
    rng = stream(cfg.seed, "step", state.step)
    with precision(cfg.precision):
        flips = rng.random(len(batch)) < cfg.flip_prob
        batch = np.stack([hflip(v) if f else v for v, f in zip(batch, flips)])
        params = state.named_parameters()
        for p in params.values():
            p.grad = None
        loss, comp = total_loss(batch, state, rng, hooks)
        value = float(loss.data)
        if not np.isfinite(value) or not all(np.isfinite([comp.l1, comp.svq, comp.prior_nll])):
            raise NumericError(
                f"non-finite loss at step {state.step}: L={value} L1={comp.l1} svq={comp.svq} prior_nll={comp.prior_nll}"
            )
        loss.backward()
        state.tokenizer.quantizer.record_usage(comp.tokens)
        gnorm = clip_grad_norm(params.values(), cfg.grad_clip)
        lr = lr_at(state.step, cfg.base_lr, cfg.warmup_steps, cfg.total_steps)
        state.optimizer.step(lr)
        state.tokenizer.quantizer.book.renormalize(rng)
        _maybe_reseed(state, rng, batch)
    metrics = StepMetrics(state.step, lr, value, comp.l1, comp.svq, comp.prior_nll, gnorm)
    state.history.append((state.step, value, comp.l1, comp.svq, comp.prior_nll))
    state.step += 1
    return metrics


def _maybe_reseed(state: TrainState, rng: np.random.Generator, batch: np.ndarray) -> None:
    cfg = state.cfg
    interval = cfg.dead_code_interval or max(1, math.ceil(cfg.num_clips / cfg.batch_size))
    if (state.step + 1) % interval:
        return
    q = state.tokenizer.quantizer
    with no_grad():
        emb = state.tokenizer.patch(batch)
        z = _query_outputs(state.tokenizer, emb)
        recent = q.projector_in(z).data
    dead = q.reseed_dead(rng, recent)
    if dead.size:
        state.optimizer.reset_rows("tok.quantizer.book.vectors", dead)


def _query_outputs(tok: Tokenizer, emb: Tensor) -> Tensor:
    B = emb.shape[0]
    x = ops.concat([ops.broadcast_to(tok.holistic_queries, (B, tok.n, tok.cfg.d)), emb + tok.patch.pos_enc], axis=1)
    return tok.encoder(x, keep=tok.n)


def batch_indices(seed: int, step: int, dataset_size: int, batch_size: int) -> np.ndarray:
    """Clip indices for ``step``: epoch-wise shuffles, a pure function of (seed, step)."""
    per_epoch = max(1, dataset_size // batch_size)
    epoch, pos = divmod(step, per_epoch)
    perm = stream(seed, "epoch", epoch).permutation(dataset_size)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def train(state: TrainState, videos: np.ndarray, steps: int | None = None, log: Callable[[StepMetrics], None] | None = None,
          hooks=None) -> list[StepMetrics]:
    cfg = state.cfg
    end = cfg.total_steps if steps is None else min(cfg.total_steps, state.step + steps)
    out = []
    while state.step < end:
        idx = batch_indices(cfg.seed, state.step, len(videos), cfg.batch_size)
        m = train_step(state, videos[idx], hooks)
        out.append(m)
        if log:
            log(m)
    return out


# -- CK01 bundles ---------------------------------------------------------------------------------

CK_MAGIC = b"CK01"


def encode_bundle(entries: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CK_MAGIC)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(encode_tensor(np.asarray(arr, dtype=np.float64)))
    return buf.getvalue()


def decode_bundle(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != CK_MAGIC:
        raise CheckpointError("bad CK01 magic at offset 0")
    if len(buf) < 8:
        raise CheckpointError("truncated CK01 header at offset 4")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if pos + 2 > len(buf):
            raise CheckpointError(f"truncated entry header at offset {pos}")
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + ln > len(buf):
            raise CheckpointError(f"truncated entry name at offset {pos}")
        try:
            name = buf[pos:pos + ln].decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"entry name at offset {pos} is not UTF-8") from None
        pos += ln
        try:
            arr, pos = decode_tensor(buf, pos)
        except FormatError as e:
            raise CheckpointError(f"entry {name!r}: {e}") from None
        out[name] = arr
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes at offset {pos}")
    return out


def text_to_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def array_to_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")


def _require(entries: dict, name: str) -> np.ndarray:
    if name not in entries:
        raise CheckpointError(f"checkpoint is missing tensor {name!r}")
    return entries[name]


def header_array(cfg: RunConfig) -> np.ndarray:
    return np.array([cfg.n_tokens, cfg.codebook_size, cfg.d, cfg.frames, cfg.height, cfg.width], dtype=np.float64)


def state_entries(state: TrainState) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {
        "meta.config": text_to_array(state.cfg.to_text()),
        "meta.header": header_array(state.cfg),
        "state.step": np.array([state.step], dtype=np.float64),
        "state.adam_t": np.array([state.optimizer.t], dtype=np.float64),
        "state.history": np.array(list(state.history), dtype=np.float64).reshape(-1, 5),
        "state.usage": state.tokenizer.quantizer.usage.astype(np.float64),
    }
    for k, p in state.named_parameters().items():
        entries[f"param.{k}"] = p.data
        entries[f"adam.m.{k}"] = state.optimizer.m[k]
        entries[f"adam.v.{k}"] = state.optimizer.v[k]
    return entries


def save_checkpoint(state: TrainState, path=None) -> bytes:
    data = encode_bundle(state_entries(state))
    if path is not None:
        Path(path).write_bytes(data)
    return data


def load_checkpoint(source) -> TrainState:
    buf = source if isinstance(source, (bytes, bytearray)) else _read(source)
    entries = decode_bundle(bytes(buf))
    cfg = RunConfig.from_text(array_to_text(_require(entries, "meta.config")))
    state = init_state(cfg)
    dtype = np.dtype(cfg.precision)
    for k, p in state.named_parameters().items():
        arr = _require(entries, f"param.{k}")
        if arr.shape != p.shape:
            raise CheckpointError(f"tensor 'param.{k}': shape {arr.shape} does not match {p.shape}")
        p.data = arr.astype(dtype)
        state.optimizer.m[k] = _require(entries, f"adam.m.{k}").astype(dtype)
        state.optimizer.v[k] = _require(entries, f"adam.v.{k}").astype(dtype)
    state.step = int(_require(entries, "state.step")[0])
    state.optimizer.t = int(_require(entries, "state.adam_t")[0])
    state.history.extend(tuple(r) for r in _require(entries, "state.history").tolist())
    state.tokenizer.quantizer.usage = _require(entries, "state.usage").astype(np.int64)
    return state


def _read(path) -> bytes:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    return p.read_bytes()


def check_compatible(cfg: RunConfig, entries: dict[str, np.ndarray]) -> None:
    """Reject a checkpoint whose (n, c, d, extents) header differs from ``cfg``."""
    head = _require(entries, "meta.header")
    want = header_array(cfg)
    if head.shape != want.shape or np.any(head != want):
        names = ("n_tokens", "codebook_size", "d", "frames", "height", "width")
        diffs = [f"{k}: checkpoint {int(a)} vs config {int(b)}" for k, a, b in zip(names, head, want) if a != b]
        raise CheckpointError("checkpoint mismatch (" + "; ".join(diffs) + ")")


def moving_average(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.array([v.mean()]) if v.size else v
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def module_bytes(module: Module) -> int:
    return sum(p.data.nbytes for p in module.parameters())


# -- generator training -------------------------------------------------------------------------


@dataclass
class GenState:
    cfg: RunConfig
    generator: Generator
    optimizer: Adam
    step: int = 0

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"gen.{k}": v for k, v in self.generator.named_parameters()}


def init_gen_state(cfg: RunConfig) -> GenState:
    with precision(cfg.precision):
        rng = stream(cfg.seed, "gen-init")
        max_len = 2 * cfg.n_tokens + 1 if cfg.gen_task == "frame" else cfg.n_tokens
        gen = Generator(rng, cfg.codebook_size, cfg.num_classes, cfg.n_tokens, cfg.generator_config(), max_len)
    state = GenState(cfg, gen, optimizer=None)  # type: ignore[arg-type]
    state.optimizer = Adam(state.named_parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps,
                           weight_decay=cfg.gen_weight_decay)
    return state


def gen_batch_indices(seed: int, step: int, size: int, batch_size: int) -> np.ndarray:
    per_epoch = max(1, size // batch_size)
    epoch, pos = divmod(step, per_epoch)
    perm = stream(seed, "gen-epoch", epoch).permutation(size)
    return perm[pos * batch_size:(pos + 1) * batch_size]


def gen_train_step(state: GenState, seqs: np.ndarray, aux: np.ndarray) -> float:
    """One AdamW update. ``aux`` holds class ids (class task) or conditioning tokens (frame task)."""
    cfg = state.cfg
    rng = stream(cfg.seed, "gen-step", state.step)
    with precision(cfg.precision):
        params = state.named_parameters()
        for p in params.values():
            p.grad = None
        if cfg.gen_task == "class":
            loss = gen_loss(seqs, aux, state.generator, cfg.cfg_config(), rng, training=True)
        else:
            loss = frame_loss(aux, seqs, state.generator, rng, training=True)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite generator loss at step {state.step}")
        loss.backward()
        clip_grad_norm(params.values(), cfg.grad_clip)
        state.optimizer.step(lr_at(state.step, cfg.gen_lr, cfg.gen_warmup_steps, cfg.gen_steps))
    state.step += 1
    return value


def train_generator(state: GenState, seqs: np.ndarray, aux: np.ndarray, steps: int | None = None,
                    log: Callable[[int, float], None] | None = None) -> list[float]:
    cfg = state.cfg
    end = cfg.gen_steps if steps is None else min(cfg.gen_steps, state.step + steps)
    out = []
    while state.step < end:
        idx = gen_batch_indices(cfg.seed, state.step, len(seqs), cfg.gen_batch_size)
        step = state.step
        out.append(gen_train_step(state, seqs[idx], aux[idx]))
        if log:
            log(step, out[-1])
    return out


def heldout_gen_nll(state: GenState, seqs: np.ndarray, aux: np.ndarray, batch_size: int = 32) -> float:
    """Mean per-token NLL without dropout or class dropping."""
    cfg = state.cfg
    total, count = 0.0, 0
    with no_grad(), precision(cfg.precision):
        for i in range(0, len(seqs), batch_size):
            s, a = seqs[i:i + batch_size], aux[i:i + batch_size]
            if cfg.gen_task == "class":
                nll = gen_loss(s, a, state.generator, CfgConfig(cfg.cfg_scale, 0.0), None, training=False)
            else:
                nll = frame_loss(a, s, state.generator, None, training=False)
            total += float(nll.data) * len(s)
            count += len(s)
    return total / max(count, 1)


def gen_entries(state: GenState) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {
        "meta.config": text_to_array(state.cfg.to_text()),
        "meta.header": header_array(state.cfg),
        "state.step": np.array([state.step], dtype=np.float64),
        "state.adam_t": np.array([state.optimizer.t], dtype=np.float64),
    }
    for k, p in state.named_parameters().items():
        entries[f"param.{k}"] = p.data
        entries[f"adam.m.{k}"] = state.optimizer.m[k]
        entries[f"adam.v.{k}"] = state.optimizer.v[k]
    return entries


def save_generator(state: GenState, path=None) -> bytes:
    data = encode_bundle(gen_entries(state))
    if path is not None:
        Path(path).write_bytes(data)
    return data


def load_generator(source) -> GenState:
    buf = source if isinstance(source, (bytes, bytearray)) else _read(source)
    entries = decode_bundle(bytes(buf))
    cfg = RunConfig.from_text(array_to_text(_require(entries, "meta.config")))
    state = init_gen_state(cfg)
    dtype = np.dtype(cfg.precision)
    for k, p in state.named_parameters().items():
        arr = _require(entries, f"param.{k}")
        if arr.shape != p.shape:
            raise CheckpointError(f"tensor 'param.{k}': shape {arr.shape} does not match {p.shape}")
        p.data = arr.astype(dtype)
        state.optimizer.m[k] = _require(entries, f"adam.m.{k}").astype(dtype)
        state.optimizer.v[k] = _require(entries, f"adam.v.{k}").astype(dtype)
    state.step = int(_require(entries, "state.step")[0])
    state.optimizer.t = int(_require(entries, "state.adam_t")[0])
    return state


def read_entries(path) -> dict[str, np.ndarray]:
    return decode_bundle(_read(path))


# -- end-to-end gradient check ----------------------------------------------------------------------


def grad_check_config(seed: int = 0) -> RunConfig:
    """A tiny 64-bit model over a 2x8x8 video that still exercises every loss term."""
    return RunConfig(seed=seed, precision="float64", num_clips=2, frames=2, height=8, width=8, f_t=1, f_h=4, f_w=4,
                     d=16, heads=2, enc_depth=1, dec_depth=1, n_tokens=4, codebook_size=8, code_dim=4, mlp_ratio=2,
                     prior_d=16, prior_depth=1, prior_heads=2, total_steps=10, warmup_steps=0, batch_size=2,
                     flip_prob=0.0)


def full_loss_grad_check(seed: int = 0, h: float = 1e-5, per_tensor: int | None = 16) -> list[tuple[str, float]]:
    """Worst relative error per parameter tensor of the joint tokenizer + prior loss.

    The quantizer runs in check mode (straight-through treated as identity,
    stop-gradient operands frozen) so the loss is differentiable in the
    classical sense. Step is
    set past the sampling warm-up so both prior rounds contribute, and the rng
    is rebuilt for every evaluation so token draws stay fixed. ``per_tensor``
    caps the number of checked elements per tensor (random, seeded); ``None``
    checks every element.
    """
    cfg = grad_check_config(seed)
    state = init_state(cfg)
    state.step = cfg.total_steps
    state.tokenizer.quantizer.enter_check_mode()
    pick = stream(seed, "gradcheck", "elements")
    video = stream(seed, "gradcheck", "video").uniform(0.05, 0.95, size=(2, cfg.frames, cfg.height, cfg.width, 3))
    out = []
    with precision("float64"):
        def f(_):
            loss, _ = total_loss(video, state, stream(seed, "gradcheck", "loss"))
            return loss

        for name, p in state.named_parameters().items():
            idx = None
            if per_tensor is not None and p.size > per_tensor:
                idx = np.sort(pick.choice(p.size, per_tensor, replace=False))
            out.append((name, grad_check(f, p, h, idx)))
    return out
