"""Flat key=value run configuration.

Every tunable of every module lives in :class:`RunConfig`. The text form is
one ``key=value`` per line in field order; ``#`` starts a comment. Unknown
keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .generator import CfgConfig, GeneratorConfig
from .prior import PriorConfig, SampleSchedule
from .quantizer import QuantizerConfig
from .tokenizer import TokenizerConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float64"
    # data
    data_dir: str = ""
    num_classes: int = 4
    num_clips: int = 256
    frames: int = 8
    height: int = 32
    width: int = 32
    f_t: int = 2
    f_h: int = 4
    f_w: int = 4
    # tokenizer
    d: int = 128
    heads: int = 4
    enc_depth: int = 4
    dec_depth: int = 4
    n_tokens: int = 64
    codebook_size: int = 512
    code_dim: int = 8
    mlp_ratio: int = 4
    # quantizer
    temperature: float = 0.03
    commitment_weight: float = 0.25
    codebook_weight: float = 1.0
    total_weight: float = 0.1
    deterministic: bool = False
    # prior
    prior_d: int = 128
    prior_depth: int = 2
    prior_heads: int = 4
    prior_temperature: float = 0.03
    peak_rate: float = 0.5
    warm_frac: float = 0.3
    # tokenizer training
    alpha: float = 0.06
    prior_lr_mult: float = 50.0
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    total_steps: int = 2000
    warmup_steps: int = 100
    batch_size: int = 8
    flip_prob: float = 0.5
    grad_clip: float = 1.0
    dead_code_interval: int = 0
    l1_weight: float = 1.0
    # generator
    gen_d: int = 192
    gen_depth: int = 4
    gen_heads: int = 4
    token_dropout: float = 0.1
    resid_dropout: float = 0.1
    ff_dropout: float = 0.1
    cfg_scale: float = 1.25
    class_drop_prob: float = 0.1
    gen_task: str = "class"
    gen_lr: float = 6e-4
    gen_weight_decay: float = 0.05
    gen_steps: int = 2000
    gen_warmup_steps: int = 100
    gen_batch_size: int = 16
    cond_frames: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision!r}")
        if self.gen_task not in ("class", "frame"):
            raise ConfigError(f"gen_task must be 'class' or 'frame', got {self.gen_task!r}")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.prior_lr_mult <= 0:
            raise ConfigError("prior_lr_mult must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        for name, fname in (("frames", "f_t"), ("height", "f_h"), ("width", "f_w")):
            e, f = getattr(self, name), getattr(self, fname)
            if e <= 0 or f <= 0 or e % f:
                raise ConfigError(f"{name}={e} not divisible by patch factor {fname}={f}")
        if self.warmup_steps < 0 or self.total_steps < 1 or self.warmup_steps > self.total_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps and total_steps >= 1")

    # -- sub-configs ------------------------------------------------------------------
    def tokenizer_config(self) -> TokenizerConfig:
        return TokenizerConfig(self.frames, self.height, self.width, self.f_t, self.f_h, self.f_w, self.d,
                               self.heads, self.enc_depth, self.dec_depth, self.n_tokens, self.codebook_size,
                               self.code_dim, self.mlp_ratio)

    def quantizer_config(self) -> QuantizerConfig:
        return QuantizerConfig(self.temperature, self.commitment_weight, self.codebook_weight, self.total_weight,
                               self.deterministic)

    def prior_config(self) -> PriorConfig:
        return PriorConfig(self.prior_d, self.prior_depth, self.prior_heads, self.prior_temperature)

    def schedule(self) -> SampleSchedule:
        return SampleSchedule(self.peak_rate, self.warm_frac, self.total_steps)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(self.gen_d, self.gen_depth, self.gen_heads, self.token_dropout, self.resid_dropout,
                               self.ff_dropout)

    def cfg_config(self) -> CfgConfig:
        return CfgConfig(self.cfg_scale, self.class_drop_prob)

    # -- text form -----------------------------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = parse_pairs(text)
        return (base or cls()).updated(values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_text(p.read_text())

    def updated(self, values: dict[str, str]) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _coerce(key, raw, type(getattr(self, key)))
        return dataclasses.replace(self, **kw)

    def with_env(self) -> "RunConfig":
        """Apply the ``LARP_SEED`` environment override."""
        raw = os.environ.get("LARP_SEED")
        return self.updated({"seed": raw}) if raw not in (None, "") else self


def parse_pairs(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw, typ):
    if not isinstance(raw, str):
        return typ(raw)
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None
