"""Latent-space diagnostics for a trained tokenizer.

Token ablation and heat maps probe how much each holistic token matters and
where in the video its influence lands. N-gram tables and class dominance
scores summarize the token corpus. The redundancy sweep measures
reconstruction quality as the number of distinct frames in a clip shrinks.

Everything here is read-only with respect to model parameters.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tokenizer import Tokenizer, psnr
from .videodata import DataError, export_frames, repeat_pad

LEVELS = (1, 2, 4, 8, 16)


# -- token ablation -----------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRecord:
    video_id: int
    token_idx: int
    delta_psnr: float


def random_other(rng: np.random.Generator, current: int, c: int) -> int:
    """Uniform draw from ``[0, c)`` excluding ``current``."""
    r = int(rng.integers(0, c - 1))
    return r + (r >= current)


def ablate_token(video: np.ndarray, tokens: np.ndarray, index: int, value: int, tokenizer: Tokenizer,
                 base_psnr: float | None = None) -> float:
    """PSNR drop from setting ``tokens[index] = value``."""
    if base_psnr is None:
        base_psnr = psnr(video, tokenizer.decode(tokens))
    mod = np.array(tokens, copy=True)
    mod[index] = value
    return base_psnr - psnr(video, tokenizer.decode(mod))


def token_ablation(videos, tokenizer: Tokenizer, rng: np.random.Generator,
                   video_ids=None) -> list[AblationRecord]:
    """ΔPSNR for replacing each token of each video with a different random index.

    Every video is decoded one clip at a time so the baseline and the edited
    decodes go through exactly the same arithmetic.
    """
    vids = np.asarray(videos)
    ids = list(range(len(vids))) if video_ids is None else list(video_ids)
    c = tokenizer.codebook_size
    out = []
    for vid, video in zip(ids, vids):
        tokens = tokenizer.tokenize(video[None])[0]
        base = psnr(video, tokenizer.decode(tokens))
        for i in range(tokenizer.n):
            value = random_other(rng, int(tokens[i]), c)
            out.append(AblationRecord(int(vid), i, ablate_token(video, tokens, i, value, tokenizer, base)))
    return out


def top_share(records: list[AblationRecord], frac: float = 0.1) -> dict[int, float]:
    """Per video, the share of positive ΔPSNR mass held by the top ``frac`` of tokens."""
    by_video: dict[int, list[float]] = {}
    for r in records:
        by_video.setdefault(r.video_id, []).append(max(r.delta_psnr, 0.0))
    out = {}
    for vid, deltas in by_video.items():
        d = np.sort(np.asarray(deltas))[::-1]
        total = d.sum()
        k = max(1, math.ceil(frac * d.size))
        out[vid] = float(d[:k].sum() / total) if total > 0 else 0.0
    return out


# -- heat maps ----------------------------------------------------------------------------


def token_heatmap(videos, token_index: int, tokenizer: Tokenizer) -> list[np.ndarray]:
    """Per video, ``|decode(x) - decode(x with token_index set to 0)|`` summed over channels."""
    if not 0 <= token_index < tokenizer.n:
        raise DataError(f"token index {token_index} outside [0, {tokenizer.n})")
    heats = []
    for video in np.asarray(videos):
        tokens = tokenizer.tokenize(video[None])[0]
        mod = tokens.copy()
        mod[token_index] = 0
        heats.append(np.abs(tokenizer.decode(tokens) - tokenizer.decode(mod)).sum(axis=-1))
    return heats


def normalized_heat(heat: np.ndarray) -> np.ndarray:
    peak = float(heat.max()) if heat.size else 0.0
    return heat / peak if peak > 0 else np.zeros_like(heat)


def export_heatmap(directory, heat: np.ndarray, stem: str) -> list[Path]:
    """One grayscale PPM per frame, brightness scaled by the field's maximum."""
    return export_frames(directory, normalized_heat(heat), stem)


def heat_coverage(heat: np.ndarray, factors, mass: float = 0.9) -> float:
    """Fraction of patch cells needed to hold ``mass`` of the total heat."""
    ft, fh, fw = factors
    T, H, W = heat.shape
    cells = heat.reshape(T // ft, ft, H // fh, fh, W // fw, fw).sum(axis=(1, 3, 5)).reshape(-1)
    total = cells.sum()
    if total <= 0:
        return 0.0
    csum = np.cumsum(np.sort(cells)[::-1])
    needed = int(np.searchsorted(csum, mass * total) + 1)
    return min(needed, cells.size) / cells.size


# -- n-gram statistics --------------------------------------------------------------------


@dataclass
class NgramTable:
    order: int
    num_classes: int
    counts: Counter = field(default_factory=Counter)
    per_class: Counter = field(default_factory=Counter)  # (ngram, class) -> count
    num_sequences: int = 0

    def class_counts(self, gram: tuple[int, ...]) -> np.ndarray:
        return np.array([self.per_class.get((gram, j), 0) for j in range(self.num_classes)], dtype=np.int64)


def ngram_stats(sequences, classes, order: int, num_classes: int | None = None) -> NgramTable:
    """Sliding-window n-gram counts inside each sequence, globally and per class."""
    if order not in (2, 3):
        raise ValueError(f"n-gram order must be 2 or 3, got {order}")
    seqs = [np.asarray(s, dtype=np.int64).reshape(-1) for s in sequences]
    cls = [int(k) for k in classes]
    if len(seqs) != len(cls):
        raise DataError(f"{len(seqs)} sequences but {len(cls)} class labels")
    J = num_classes if num_classes is not None else (max(cls) + 1 if cls else 0)
    if any(not 0 <= k < J for k in cls):
        raise DataError(f"class labels must lie in [0, {J})")
    table = NgramTable(order, J, num_sequences=len(seqs))
    for s, k in zip(seqs, cls):
        if s.size < order:
            continue
        windows = np.lib.stride_tricks.sliding_window_view(s, order)
        grams = Counter(map(tuple, windows.tolist()))
        table.counts.update(grams)
        table.per_class.update({(g, k): v for g, v in grams.items()})
    return table


def histogram_edges(max_count: int) -> list[tuple[int, int]]:
    """Half-open frequency buckets: unit width up to 100, then doubling."""
    edges = [(k, k + 1) for k in range(1, min(max_count, 100) + 1)]
    lo = 101
    while lo <= max_count:
        hi = 2 * lo - 1
        edges.append((lo, hi))
        lo = hi
    return edges


def ngram_histogram(table: NgramTable) -> list[tuple[int, int, int]]:
    """Rows ``(bucket_lo, bucket_hi, unique_ngrams)`` over occurrence frequency."""
    if not table.counts:
        return []
    freq = np.array(sorted(table.counts.values()), dtype=np.int64)
    rows = []
    for lo, hi in histogram_edges(int(freq[-1])):
        n = int(np.searchsorted(freq, hi, side="left") - np.searchsorted(freq, lo, side="left"))
        rows.append((lo, hi, n))
    return rows


@dataclass(frozen=True)
class DominanceScore:
    score: float
    ngram: tuple[int, ...]
    cls: int


def class_dominance(table: NgramTable, threshold: int) -> list[DominanceScore]:
    """``max_j n(b, j) / n(b)`` for every n-gram with ``n(b) >= threshold``, highest first.

    Ties in score are ordered by n-gram; the reported class is the lowest
    index among the maximizers.
    """
    if threshold < 1:
        raise ValueError("dominance threshold must be at least 1")
    out = []
    for gram, total in table.counts.items():
        if total < threshold:
            continue
        per = table.class_counts(gram)
        j = int(np.argmax(per))
        out.append(DominanceScore(int(per[j]) / total, gram, j))
    out.sort(key=lambda s: (-s.score, s.ngram))
    return out


# -- redundancy sweep ---------------------------------------------------------------------


def repeated_video(clip: np.ndarray, level: int) -> np.ndarray:
    """``T / level`` leading frames of ``clip`` tiled ``level`` times."""
    T = clip.shape[0]
    if level < 1 or T % level:
        raise DataError(f"repetition level {level} does not divide {T} frames")
    return repeat_pad(clip[: T // level], T, mode="cycle")


def redundancy_sweep(base_frames, tokenizer: Tokenizer, levels=LEVELS) -> dict[int, float]:
    """Mean reconstruction PSNR of cyclically repeated clips at each level."""
    vids = np.asarray(base_frames)
    T = tokenizer.cfg.frames
    for r in levels:
        if r < 1 or T % r:
            raise DataError(f"repetition level {r} does not divide {T} frames")
    out = {}
    for r in levels:
        scores = []
        for clip in vids:
            v = repeated_video(clip, r)
            scores.append(psnr(v, tokenizer.reconstruct_numpy(v)))
        out[r] = float(np.mean(scores))
    return out


def inversions(values) -> list[float]:
    """Sizes of the decreases between consecutive entries."""
    v = list(values)
    return [a - b for a, b in zip(v, v[1:]) if b < a]


# -- CSV exports ----------------------------------------------------------------------------


def _write_csv(path, header, rows) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return p


def _num(x: float) -> str:
    return f"{x:.9g}"


def _gram(g) -> str:
    return " ".join(str(int(t)) for t in g)


def write_ablation_csv(path, records: list[AblationRecord]) -> Path:
    return _write_csv(path, ("video_id", "token_idx", "delta_psnr"),
                      ((r.video_id, r.token_idx, _num(r.delta_psnr)) for r in records))


def write_histogram_csv(path, rows) -> Path:
    return _write_csv(path, ("bucket_lo", "bucket_hi", "unique_ngrams"), rows)


def write_dominance_csv(path, scores: list[DominanceScore]) -> Path:
    return _write_csv(path, ("rank", "score", "ngram", "class"),
                      ((i + 1, _num(s.score), _gram(s.ngram), s.cls) for i, s in enumerate(scores)))


def write_redundancy_csv(path, sweep: dict[int, float]) -> Path:
    return _write_csv(path, ("level", "mean_psnr"), ((r, _num(v)) for r, v in sweep.items()))
