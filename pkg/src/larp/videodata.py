"""Synthetic labelled clips, patch layout, padding recipes and clip I/O.

Videos are float arrays of shape (T, H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Linear, Module, Tensor, ops, sincos_3d, stream
from .numerics.dtio import load_tensor, save_tensor


class DataError(ValueError):
    pass


@dataclass
class LabeledClip:
    video: np.ndarray
    class_id: int
    num_classes: int

    def __post_init__(self):
        if not 0 <= self.class_id < self.num_classes:
            raise DataError(f"class_id {self.class_id} outside [0, {self.num_classes})")


def check_extents(extents: tuple[int, int, int], factors: tuple[int, int, int]) -> None:
    for name, e, f in zip("THW", extents, factors):
        if e <= 0 or f <= 0 or e % f:
            raise DataError(f"extent {name}={e} not divisible by patch factor {f}")


def grid_shape(extents, factors) -> tuple[int, int, int]:
    check_extents(extents, factors)
    return tuple(e // f for e, f in zip(extents, factors))


def num_patches(extents, factors) -> int:
    t, h, w = grid_shape(extents, factors)
    return t * h * w


# -- patch layout ---------------------------------------------------------------


def extract_patches(video: np.ndarray, factors) -> np.ndarray:
    """(..., T, H, W, 3) -> (..., m, fT*fH*fW*3), time-major, then rows, then columns."""
    *lead, T, H, W, C = video.shape
    fT, fH, fW = factors
    check_extents((T, H, W), factors)
    nb = len(lead)
    x = video.reshape(*lead, T // fT, fT, H // fH, fH, W // fW, fW, C)
    perm = list(range(nb)) + [nb + i for i in (0, 2, 4, 1, 3, 5, 6)]
    x = x.transpose(perm)
    return x.reshape(*lead, (T // fT) * (H // fH) * (W // fW), fT * fH * fW * C)


def unpatchify(patches: np.ndarray, extents, factors) -> np.ndarray:
    """Exact inverse of :func:`extract_patches`."""
    T, H, W = extents
    fT, fH, fW = factors
    gt, gh, gw = grid_shape(extents, factors)
    *lead, m, p = patches.shape
    if m != gt * gh * gw or p != fT * fH * fW * 3:
        raise DataError(f"patch table {patches.shape[-2:]} does not match extents {extents} / factors {factors}")
    nb = len(lead)
    x = patches.reshape(*lead, gt, gh, gw, fT, fH, fW, 3)
    perm = list(range(nb)) + [nb + i for i in (0, 3, 1, 4, 2, 5, 6)]
    return x.transpose(perm).reshape(*lead, T, H, W, 3)


def unpatchify_tensor(patches: Tensor, extents, factors) -> Tensor:
    """Differentiable :func:`unpatchify` for (B, m, p) tensors."""
    T, H, W = extents
    fT, fH, fW = factors
    gt, gh, gw = grid_shape(extents, factors)
    B = patches.shape[0]
    x = patches.reshape(B, gt, gh, gw, fT, fH, fW, 3).transpose(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(B, T, H, W, 3)


class PatchConfig(Module):
    """Linear patchifier: per-patch projection to width ``d`` plus a fixed 3-D sin-cos table."""

    def __init__(self, rng: np.random.Generator, extents, factors, d: int):
        self.extents = tuple(extents)
        self.factors = tuple(factors)
        self.d = d
        self.grid = grid_shape(self.extents, self.factors)
        self.m = int(np.prod(self.grid))
        self.patch_dim = int(np.prod(self.factors)) * 3
        self.projection = Linear(rng, self.patch_dim, d)
        self.pos_enc = sincos_3d(self.grid, d)

    def __call__(self, video) -> Tensor:
        """Patch embeddings (B, m, d) for a video batch (B, T, H, W, 3) or a single clip."""
        v = np.asarray(video)
        if v.ndim == 4:
            v = v[None]
        if tuple(v.shape[1:4]) != self.extents:
            raise DataError(f"video extents {tuple(v.shape[1:4])} do not match configured {self.extents}")
        return self.projection(Tensor(extract_patches(v, self.factors)))


def patchify(video, cfg: PatchConfig) -> Tensor:
    return cfg(video)


# -- padding recipes ---------------------------------------------------------------


def repeat_pad(clip: np.ndarray, target: int, mode: str = "last") -> np.ndarray:
    """Extend a T0-frame clip to ``target`` frames.

    ``mode="last"`` repeats the final frame; ``mode="cycle"`` tiles the clip.
    """
    T0 = clip.shape[0]
    if not 1 <= T0 <= target:
        raise DataError(f"cannot pad {T0} frames to {target}")
    if mode == "last":
        idx = np.minimum(np.arange(target), T0 - 1)
    elif mode == "cycle":
        idx = np.arange(target) % T0
    else:
        raise ValueError(f"unknown padding mode {mode!r}")
    return clip[idx]


def hflip(video: np.ndarray) -> np.ndarray:
    return video[..., ::-1, :].copy()


# -- synthetic dataset ---------------------------------------------------------------

_SHAPES = ("square", "disk", "triangle", "cross")


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "triangle":
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    arm = max(r / 2.5, 0.75)
    return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))


def class_velocity(k: int, num_classes: int, extents) -> tuple[float, float]:
    """Per-frame (dy, dx) velocity of class ``k``; classes differ in direction and speed."""
    _, H, W = extents
    angle = 2 * np.pi * k / num_classes + 0.35
    speed = max(H, W) / 16 * (1.0 + 0.5 * (k // 4 % 3))
    return speed * np.sin(angle), speed * np.cos(angle)


def render_clip(k: int, num_classes: int, extents, rng: np.random.Generator) -> np.ndarray:
    T, H, W = extents
    kind = _SHAPES[k % 4]
    vy, vx = class_velocity(k, num_classes, extents)
    yy, xx = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    base = rng.uniform(0.05, 0.45, size=3)
    tilt = rng.uniform(-0.15, 0.15, size=3)
    background = base + tilt * (yy / H - 0.5)[..., None]
    color = rng.uniform(0.55, 1.0, size=3)
    r = min(H, W) * rng.uniform(0.16, 0.24)
    y0, x0 = rng.uniform(0, H), rng.uniform(0, W)
    out = np.empty((T, H, W, 3))
    for t in range(T):
        cy, cx = (y0 + vy * t) % H, (x0 + vx * t) % W
        mask = np.zeros((H, W), dtype=bool)
        # draw wrapped copies so shapes re-enter from the opposite edge
        for oy in (-H, 0, H):
            for ox in (-W, 0, W):
                mask |= _shape_mask(kind, yy, xx, cy + oy, cx + ox, r)
        out[t] = np.where(mask[..., None], color, background)
    return np.clip(out, 0.0, 1.0)


def synth_dataset(seed: int, num_classes: int, count: int, extents, factors=(1, 1, 1),
                  start: int = 0) -> list[LabeledClip]:
    """Deterministic moving-shape clips, classes assigned round-robin.

    Clip ``i`` depends only on ``(seed, i)``, so ``start`` gives disjoint
    held-out clips from the same distribution.
    """
    if num_classes < 2:
        raise DataError("need at least 2 classes")
    check_extents(tuple(extents), tuple(factors))
    clips = []
    for i in range(start, start + count):
        k = i % num_classes
        rng = stream(seed, "synth", i)
        clips.append(LabeledClip(render_clip(k, num_classes, tuple(extents), rng), k, num_classes))
    return clips


# -- clip I/O -------------------------------------------------------------------------


def save_clips(directory, clips: list[LabeledClip]) -> Path:
    """Write clips as DT01 files plus a ``manifest.tsv`` (path<TAB>class_id)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, clip in enumerate(clips):
        name = f"clip_{i:05d}.dt"
        save_tensor(d / name, clip.video)
        lines.append(f"{name}\t{clip.class_id}")
    manifest = d / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_clips(manifest, num_classes: int | None = None) -> list[LabeledClip]:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"manifest not found: {manifest}")
    entries = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            path, cls = line.split("\t")
            entries.append((manifest.parent / path, int(cls)))
        except ValueError:
            raise DataError(f"{manifest}:{lineno}: expected 'path<TAB>class_id'") from None
    J = num_classes if num_classes is not None else max(c for _, c in entries) + 1
    clips = []
    for path, cls in entries:
        video = load_tensor(path)
        if video.ndim != 4 or video.shape[-1] != 3:
            raise DataError(f"{path}: expected a (T, H, W, 3) tensor, got {video.shape}")
        clips.append(LabeledClip(video, cls, J))
    return clips


def write_ppm(path, frame: np.ndarray) -> None:
    """Binary P6 image from an (H, W, 3) [0,1] frame or an (H, W) grayscale frame."""
    f = np.asarray(frame)
    if f.ndim == 2:
        f = np.repeat(f[..., None], 3, axis=-1)
    px = np.clip(np.round(f * 255.0), 0, 255).astype(np.uint8)
    H, W, _ = px.shape
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode("ascii") + px.tobytes())


def export_frames(directory, video: np.ndarray, stem: str) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, frame in enumerate(video):
        p = d / f"{stem}_f{t:02d}.ppm"
        write_ppm(p, frame)
        paths.append(p)
    return paths
