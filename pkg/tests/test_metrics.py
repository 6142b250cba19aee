from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uvector.metrics import (
    NONTARGET,
    TARGET,
    TrialList,
    compute_eer,
    det_points,
    evaluate_trials,
    fstat_cosine_report,
    read_scores,
    read_trials,
    score_histogram,
    write_scores,
    write_trials,
)
from uvector.stats import BwStats


def _eer_oracle(scores, labels):
    """Independent enumeration of every midpoint threshold."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    tgt, non = scores[labels], scores[~labels]
    distinct = np.unique(scores)
    candidates = (
        [distinct[0] - 1.0]
        + [(a + b) / 2.0 for a, b in zip(distinct[:-1], distinct[1:])]
        + [distinct[-1] + 1.0]
    )
    best = None
    for threshold in candidates:  # increasing; strict < keeps the lower tie
        fa = float(np.mean(non >= threshold))
        miss = float(np.mean(tgt < threshold))
        if best is None or abs(fa - miss) < best[0] - 1e-15:
            best = (abs(fa - miss), (fa + miss) / 2.0, threshold)
    return best[1], best[2]


# ----------------------------------------------------------------- compute_eer

def test_eer_separable_scores_zero():
    # these sets are separable at any threshold in (2.5, 2.6)
    scores = np.array([3.0, 2.6, 2.5, 1.0])
    labels = np.array([True, True, False, False])
    eer, threshold = compute_eer(scores, labels)
    assert (eer, threshold) == _eer_oracle(scores, labels)
    assert eer == 0.0
    assert 2.5 < threshold < 2.6


def test_eer_overlapping_step_levels():
    # crossing falls between step levels; enumeration gives 5/12
    scores = np.array([3.0, 2.6, 2.4, 2.5, 1.0])
    labels = np.array([True, True, True, False, False])
    eer, threshold = compute_eer(scores, labels)
    oracle_eer, oracle_thr = _eer_oracle(scores, labels)
    assert eer == pytest.approx(oracle_eer)
    assert threshold == pytest.approx(oracle_thr)
    assert eer == pytest.approx(5.0 / 12.0)


def test_eer_tie_breaks_to_lower_threshold():
    scores = np.array([1.0, 1.0])
    labels = np.array([True, False])
    eer, threshold = compute_eer(scores, labels)
    assert eer == pytest.approx(0.5)
    assert threshold == 0.0  # the lower of the two tied candidates


def test_eer_random_labels_near_half():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=10_000)
    labels = rng.uniform(size=10_000) > 0.5
    eer, _ = compute_eer(scores, labels)
    assert abs(eer - 0.5) < 0.05


def test_eer_single_label_rejected():
    with pytest.raises(ValueError):
        compute_eer(np.array([1.0, 2.0]), np.array([True, True]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40))
def test_eer_matches_enumeration_oracle(seed, n):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.normal(size=n), 2)  # rounded to force ties
    labels = rng.uniform(size=n) > 0.5
    if labels.all() or not labels.any():
        labels[0] = ~labels[0]
    eer, threshold = compute_eer(scores, labels)
    oracle_eer, oracle_thr = _eer_oracle(scores, labels)
    assert eer == pytest.approx(oracle_eer, abs=1e-12)
    assert threshold == pytest.approx(oracle_thr, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_eer_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=60)
    labels = rng.uniform(size=60) > 0.4
    if labels.all() or not labels.any():
        labels[0] = ~labels[0]
    base, _ = compute_eer(scores, labels)
    warped, _ = compute_eer(np.exp(0.5 * scores) + 3.0, labels)
    assert warped == pytest.approx(base, abs=1e-12)


# ------------------------------------------------------------------ det_points

def test_det_points_structure():
    rng = np.random.default_rng(1)
    scores = np.round(rng.normal(size=50), 1)
    labels = rng.uniform(size=50) > 0.5
    if labels.all() or not labels.any():
        labels[0] = ~labels[0]
    points = det_points(scores, labels)
    assert len(points) <= np.unique(scores).size + 1
    fa = np.array([p[0] for p in points])
    miss = np.array([p[1] for p in points])
    assert np.all((0 <= fa) & (fa <= 1)) and np.all((0 <= miss) & (miss <= 1))
    assert np.all(np.diff(fa) <= 0)
    assert np.all(np.diff(miss) >= 0)


def test_det_separable_touches_origin_corner():
    scores = np.array([5.0, 4.0, 1.0, 0.0])
    labels = np.array([True, True, False, False])
    points = det_points(scores, labels)
    assert any(fa == 0.0 and miss == 0.0 for fa, miss in points)


def test_det_identical_scores_extremes():
    points = det_points(np.array([1.0, 1.0]), np.array([True, False]))
    assert points == [(1.0, 0.0), (0.0, 1.0)]


def test_eer_point_lies_on_det_staircase():
    rng = np.random.default_rng(2)
    scores = rng.normal(size=200)
    labels = rng.uniform(size=200) > 0.5
    eer, _ = compute_eer(scores, labels)
    gaps = [abs(fa - miss) for fa, miss in det_points(scores, labels)]
    best = int(np.argmin(gaps))
    fa, miss = det_points(scores, labels)[best]
    assert eer == pytest.approx((fa + miss) / 2.0, abs=1e-12)


# ------------------------------------------------------------- score_histogram

def test_histogram_counts_sum_to_n():
    rng = np.random.default_rng(3)
    sets = {"target": rng.normal(size=120), "nontarget": rng.normal(size=300)}
    edges, counts = score_histogram(sets, num_bins=17)
    assert edges.size == 18
    assert counts["target"].sum() == 120
    assert counts["nontarget"].sum() == 300


def test_histogram_max_normalization():
    sets = {"a": np.array([1.0, 2.0, -8.0]), "b": np.array([4.0, 0.5])}
    edges, _ = score_histogram(sets, num_bins=10, normalize_by_max=True)
    assert edges[0] == pytest.approx(-1.0)  # -8 / |-8|
    assert edges[-1] <= 1.0 + 1e-12


def test_histogram_all_equal_single_bin():
    edges, counts = score_histogram({"a": np.full(7, 2.0)}, num_bins=5)
    assert counts["a"].sum() == 7
    assert (counts["a"] > 0).sum() == 1


# ---------------------------------------------------------- fstat_cosine_report

def _stats_of(vec):
    return BwStats(np.ones(1), np.asarray(vec, dtype=float)[None, :], "u")


def test_fstat_report_identical_sets_equal_means():
    trials = TrialList([("a", "b", TARGET), ("a", "c", NONTARGET)])
    stats = {"a": _stats_of([1.0, 0.0]), "b": _stats_of([1.0, 0.5]), "c": _stats_of([0.0, 1.0])}
    rows, means = fstat_cosine_report(trials, stats, stats)
    assert len(rows) == 2
    assert means[TARGET]["biased"] == pytest.approx(means[TARGET]["unbiased"])
    assert means[NONTARGET]["biased"] == pytest.approx(means[NONTARGET]["unbiased"])


def test_fstat_report_single_trial():
    trials = TrialList([("a", "b", NONTARGET)])
    stats = {"a": _stats_of([1.0, 0.0]), "b": _stats_of([0.0, 1.0])}
    rows, means = fstat_cosine_report(trials, stats, stats)
    assert len(rows) == 1
    assert rows[0]["dist_biased"] == pytest.approx(1.0)
    assert TARGET not in means


# -------------------------------------------------------------------- file I/O

def test_trials_round_trip(tmp_path):
    trials = TrialList([("e1", "t1", TARGET), ("e1", "t2", NONTARGET)])
    path = tmp_path / "trials.tsv"
    write_trials(path, trials)
    back = read_trials(path)
    assert back.trials == trials.trials


def test_trials_bad_label_rejected():
    with pytest.raises(ValueError):
        TrialList([("a", "b", "maybe")])


def test_scores_round_trip(tmp_path):
    rows = [("e1", "t1", 1.25, TARGET), ("e1", "t2", -0.5, NONTARGET)]
    path = tmp_path / "scores.csv"
    write_scores(path, rows)
    assert read_scores(path) == rows


def test_evaluate_trials_report():
    rng = np.random.default_rng(4)
    labels = np.concatenate([np.ones(50, bool), np.zeros(200, bool)])
    scores = np.concatenate([rng.normal(2.0, 1.0, 50), rng.normal(0.0, 1.0, 200)])
    report = evaluate_trials(scores, labels, num_bins=12)
    assert 0.0 <= report.eer <= 0.5
    assert report.n_trials == 250 and report.n_target == 50
    assert sum(report.histograms["counts"][TARGET]) == 50
    doc = report.to_dict()
    assert set(doc) >= {"eer", "eer_threshold", "det_points", "histograms", "n_trials"}
