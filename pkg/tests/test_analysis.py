import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from larp.analysis import (DominanceScore, class_dominance, export_heatmap, heat_coverage, histogram_edges,
                           inversions, ngram_histogram, ngram_stats, random_other, redundancy_sweep, repeated_video,
                           token_ablation, token_heatmap, top_share, write_ablation_csv, write_dominance_csv,
                           write_histogram_csv, write_redundancy_csv, AblationRecord)
from larp.trainer import build_models
from larp.videodata import DataError, synth_dataset


# -- oracles: plain dictionaries and loops -----------------------------------------------------


def oracle_counts(seqs, classes, order):
    total, per = {}, {}
    for s, k in zip(seqs, classes):
        for i in range(len(s) - order + 1):
            g = tuple(s[i:i + order])
            total[g] = total.get(g, 0) + 1
            per[(g, k)] = per.get((g, k), 0) + 1
    return total, per


def oracle_histogram(total):
    if not total:
        return []
    top = max(total.values())
    buckets = [(k, k + 1) for k in range(1, min(top, 100) + 1)]
    lo = 101
    while lo <= top:
        buckets.append((lo, 2 * lo - 1))
        lo = 2 * lo - 1
    return [(lo, hi, sum(1 for v in total.values() if lo <= v < hi)) for lo, hi in buckets]


def oracle_dominance(total, per, J, threshold):
    rows = []
    for g, n in total.items():
        if n < threshold:
            continue
        best, cls = -1, -1
        for j in range(J):
            if per.get((g, j), 0) > best:
                best, cls = per.get((g, j), 0), j
        rows.append((best / n, g, cls))
    rows.sort(key=lambda r: (-r[0], r[1]))
    return rows


def random_corpus(seed):
    r = np.random.default_rng(seed)
    J = int(r.integers(2, 5))
    c = int(r.integers(2, 9))
    count = int(r.integers(1, 30))
    seqs = [r.integers(0, c, size=int(r.integers(0, 12))).tolist() for _ in range(count)]
    return seqs, r.integers(0, J, size=count).tolist(), J


@pytest.mark.parametrize("seed", range(25))
@pytest.mark.parametrize("order", [2, 3])
def test_ngram_tables_match_oracle(seed, order):
    seqs, classes, J = random_corpus(seed)
    table = ngram_stats(seqs, classes, order, J)
    total, per = oracle_counts(seqs, classes, order)
    assert dict(table.counts) == total
    assert dict(table.per_class) == per
    assert ngram_histogram(table) == oracle_histogram(total)
    for threshold in (1, 2, 3):
        got = [(s.score, s.ngram, s.cls) for s in class_dominance(table, threshold)]
        assert got == oracle_dominance(total, per, J, threshold)


def test_hand_counted_bigrams():
    table = ngram_stats([[1, 2, 1, 2], [2, 1]], [0, 1], 2)
    assert dict(table.counts) == {(1, 2): 2, (2, 1): 2}
    assert table.class_counts((2, 1)).tolist() == [1, 1]
    scores = class_dominance(table, 2)
    assert scores == [DominanceScore(1.0, (1, 2), 0), DominanceScore(0.5, (2, 1), 0)]


def test_windows_do_not_cross_sequences():
    table = ngram_stats([[1, 2], [3, 4]], [0, 0], 2)
    assert (2, 3) not in table.counts


def test_histogram_edges():
    e = histogram_edges(450)
    assert e[0] == (1, 2) and e[99] == (100, 101)
    assert e[100:] == [(101, 201), (201, 401), (401, 801)]
    assert histogram_edges(0) == []


def test_ngram_errors():
    with pytest.raises(ValueError):
        ngram_stats([[1, 2]], [0], 4)
    with pytest.raises(DataError):
        ngram_stats([[1, 2]], [0, 1], 2)
    with pytest.raises(DataError):
        ngram_stats([[1, 2]], [5], 2, num_classes=2)
    with pytest.raises(ValueError):
        class_dominance(ngram_stats([[1, 2]], [0], 2), 0)


# -- ablation ---------------------------------------------------------------------------------


@given(st.integers(0, 1000), st.integers(2, 20))
def test_random_other_never_returns_current(seed, c):
    r = np.random.default_rng(seed)
    cur = int(r.integers(0, c))
    draws = [random_other(r, cur, c) for _ in range(50)]
    assert all(0 <= d < c and d != cur for d in draws)


def test_ablation_records_and_top_share(tiny_cfg):
    tok, _ = build_models(tiny_cfg)
    vids = np.stack([c.video for c in synth_dataset(0, 4, 2, (4, 8, 8))])
    recs = token_ablation(vids, tok, np.random.default_rng(0), video_ids=[7, 9])
    assert [(r.video_id, r.token_idx) for r in recs] == [(v, i) for v in (7, 9) for i in range(tok.n)]
    assert all(np.isfinite(r.delta_psnr) for r in recs)
    share = top_share([AblationRecord(0, i, d) for i, d in enumerate([4.0, 1.0, -2.0, 0.0, 0.0] * 2)])
    assert share[0] == pytest.approx(4.0 / 10.0)


def test_heatmap_and_coverage(tiny_cfg, tmp_path):
    tok, _ = build_models(tiny_cfg)
    vids = np.stack([c.video for c in synth_dataset(0, 4, 2, (4, 8, 8))])
    heats = token_heatmap(vids, 1, tok)
    assert len(heats) == 2 and heats[0].shape == (4, 8, 8)
    with pytest.raises(DataError):
        token_heatmap(vids, tok.n, tok)
    paths = export_heatmap(tmp_path, heats[0], "h")
    assert len(paths) == 4
    one_cell = np.zeros((4, 8, 8))
    one_cell[0, 0, 0] = 1.0
    assert heat_coverage(one_cell, (2, 4, 4)) == 1 / 8
    assert heat_coverage(np.ones((4, 8, 8)), (2, 4, 4)) == 1.0


# -- redundancy -------------------------------------------------------------------------------------


def test_repeated_video_levels():
    clip = np.arange(16.0)[:, None, None, None] * np.ones((16, 1, 1, 3))
    assert repeated_video(clip, 4)[:, 0, 0, 0].tolist() == [0, 1, 2, 3] * 4
    assert repeated_video(clip, 16)[:, 0, 0, 0].tolist() == [0] * 16
    np.testing.assert_array_equal(repeated_video(clip, 1), clip)
    with pytest.raises(DataError):
        repeated_video(clip, 3)


def test_redundancy_sweep_runs(tiny_cfg):
    tok, _ = build_models(tiny_cfg)
    vids = np.stack([c.video for c in synth_dataset(0, 4, 2, (4, 8, 8))])
    sweep = redundancy_sweep(vids, tok, levels=(1, 2, 4))
    assert list(sweep) == [1, 2, 4] and all(np.isfinite(list(sweep.values())))
    with pytest.raises(DataError):
        redundancy_sweep(vids, tok, levels=(3,))


def test_inversions():
    assert inversions([1.0, 2.0, 1.5, 3.0, 2.0]) == [0.5, 1.0]
    assert inversions([1.0, 2.0]) == []


# -- CSV --------------------------------------------------------------------------------------------------


def test_csv_writers(tmp_path):
    write_ablation_csv(tmp_path / "a.csv", [AblationRecord(0, 1, 0.5)])
    write_histogram_csv(tmp_path / "h.csv", [(1, 2, 3)])
    write_dominance_csv(tmp_path / "d.csv", [DominanceScore(0.75, (3, 4), 1)])
    write_redundancy_csv(tmp_path / "r.csv", {1: 20.0, 2: 21.5})
    assert (tmp_path / "a.csv").read_text() == "video_id,token_idx,delta_psnr\n0,1,0.5\n"
    assert (tmp_path / "h.csv").read_text() == "bucket_lo,bucket_hi,unique_ngrams\n1,2,3\n"
    assert list(csv.reader((tmp_path / "d.csv").open())) == [["rank", "score", "ngram", "class"],
                                                               ["1", "0.75", "3 4", "1"]]
    assert (tmp_path / "r.csv").read_text() == "level,mean_psnr\n1,20\n2,21.5\n"
