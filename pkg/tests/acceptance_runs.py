"""Training runs behind the directional acceptance criteria.

The desk run uses the full desk configuration. The comparisons for the prior
ablation, token count and redundancy sweeps each need several trained
models, so they use smaller configurations that finish in CPU-minutes.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from larp.config import RunConfig
from larp.generator import tokenize_corpus
from larp.tokenizer import Tokenizer, psnr
from larp.trainer import StepMetrics, TrainState, heldout_gen_nll, init_gen_state, init_state, train, train_generator
from larp.videodata import synth_dataset

DESK = RunConfig(precision="float32", total_steps=2000, batch_size=8, mlp_ratio=2)


@dataclass
class DeskRun:
    cfg: RunConfig
    state: TrainState
    metrics: list[StepMetrics]
    cpu: float

    @property
    def tokenizer(self) -> Tokenizer:
        return self.state.tokenizer


def clips_for(cfg: RunConfig, count: int | None = None, start: int = 0):
    return synth_dataset(cfg.seed, cfg.num_classes, cfg.num_clips if count is None else count,
                         (cfg.frames, cfg.height, cfg.width), (cfg.f_t, cfg.f_h, cfg.f_w), start=start)


def videos(clips) -> np.ndarray:
    return np.stack([c.video for c in clips])


def heldout(cfg: RunConfig, count: int):
    """Clips drawn after the training set, from the same distribution."""
    return clips_for(cfg, count, start=cfg.num_clips)


def desk_run() -> DeskRun:
    cfg = DESK
    data = videos(clips_for(cfg))
    state = init_state(cfg)
    t0 = time.process_time()
    metrics = train(state, data)
    return DeskRun(cfg, state, metrics, time.process_time() - t0)


# -- prior ablation ------------------------------------------------------------------------------


def ablation_config(seed: int, alpha: float) -> RunConfig:
    return RunConfig(seed=seed, alpha=alpha, precision="float32", num_clips=256, frames=4, height=16, width=16,
                     f_t=2, f_h=4, f_w=4, d=32, heads=2, enc_depth=1, dec_depth=1, n_tokens=16, codebook_size=64,
                     code_dim=4, mlp_ratio=2, prior_d=32, prior_depth=1, prior_heads=2, total_steps=600,
                     warmup_steps=20, batch_size=8, base_lr=3e-4, gen_d=64, gen_depth=2, gen_heads=2,
                     gen_steps=800, gen_warmup_steps=20, gen_batch_size=16)


def generator_heldout_nll(cfg: RunConfig) -> float:
    """Train a tokenizer, then a class-conditional generator on its tokens; NLL on held-out clips."""
    state = init_state(cfg)
    train(state, videos(clips_for(cfg)))
    seqs, classes = tokenize_corpus(clips_for(cfg), state.tokenizer)
    h_seqs, h_classes = tokenize_corpus(heldout(cfg, 64), state.tokenizer)
    gen = init_gen_state(cfg)
    train_generator(gen, seqs, classes)
    return heldout_gen_nll(gen, h_seqs, h_classes)


def ablation_pair(seed: int) -> tuple[float, float]:
    """Held-out generator NLL for the alpha=0.06 and alpha=0 tokenizers of one seed."""
    return generator_heldout_nll(ablation_config(seed, 0.06)), generator_heldout_nll(ablation_config(seed, 0.0))


# -- token count --------------------------------------------------------------------------------------


def token_count_config(n: int) -> RunConfig:
    return RunConfig(seed=0, precision="float32", num_clips=128, frames=4, height=16, width=16, f_t=2, f_h=4, f_w=4,
                     d=32, heads=2, enc_depth=1, dec_depth=1, n_tokens=n, codebook_size=64, code_dim=4,
                     mlp_ratio=2, prior_d=32, prior_depth=1, prior_heads=2, total_steps=600, warmup_steps=20,
                     batch_size=8, base_lr=3e-4)


def token_count_psnr(n: int) -> float:
    """Mean held-out reconstruction PSNR after the shared training budget."""
    cfg = token_count_config(n)
    state = init_state(cfg)
    train(state, videos(clips_for(cfg)))
    probe = videos(heldout(cfg, 32))
    rec = state.tokenizer.reconstruct_numpy(probe)
    return float(np.mean([psnr(v, r) for v, r in zip(probe, rec)]))


# -- redundancy ----------------------------------------------------------------------------------------


def redundancy_config() -> RunConfig:
    return RunConfig(seed=0, precision="float32", num_clips=128, frames=16, height=16, width=16, f_t=4, f_h=4,
                     f_w=4, d=32, heads=2, enc_depth=1, dec_depth=1, n_tokens=16, codebook_size=64, code_dim=4,
                     mlp_ratio=2, prior_d=32, prior_depth=1, prior_heads=2, total_steps=600, warmup_steps=20,
                     batch_size=8, base_lr=3e-4)


def redundancy_tokenizer() -> tuple[Tokenizer, np.ndarray]:
    """A trained T=16 tokenizer and 16 held-out probe clips."""
    cfg = redundancy_config()
    state = init_state(cfg)
    train(state, videos(clips_for(cfg)))
    return state.tokenizer, videos(heldout(cfg, 16))


# -- generator on the desk tokenizer -------------------------------------------------------------------

DESK_GEN_STEPS = 800


def desk_generator_losses(run: DeskRun) -> list[float]:
    """Per-step training loss of a class-conditional generator on the desk run's token corpus."""
    cfg = dataclasses.replace(run.cfg, gen_steps=DESK_GEN_STEPS)
    seqs, classes = tokenize_corpus(clips_for(cfg), run.tokenizer)
    return train_generator(init_gen_state(cfg), seqs, classes)
