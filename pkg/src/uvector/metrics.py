"""Trial evaluation: EER, DET staircases, score histograms, statistic diagnostics.

Conventions: a trial is accepted when its score is >= the threshold.  The
threshold sweep visits the midpoints between consecutive distinct scores
plus one point beyond each end, so every achievable (false-alarm, miss)
operating point appears exactly once.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .stats import BwStats, fstat_cosine

TARGET = "target"
NONTARGET = "nontarget"


@dataclass
class TrialList:
    """Verification trials: (enroll_utt_id, test_utt_id, label) triples."""

    trials: list[tuple[str, str, str]]

    def __post_init__(self):
        for enroll, test, label in self.trials:
            if label not in (TARGET, NONTARGET):
                raise ValueError(f"bad trial label {label!r} for ({enroll}, {test})")

    def labels(self) -> np.ndarray:
        return np.array([label == TARGET for _, _, label in self.trials])


@dataclass
class EvalReport:
    """Evaluation summary for one system."""

    eer: float
    eer_threshold: float
    det_points: list[tuple[float, float]]
    histograms: dict = field(default_factory=dict)
    n_trials: int = 0
    n_target: int = 0

    def to_dict(self) -> dict:
        return {
            "eer": self.eer,
            "eer_threshold": self.eer_threshold,
            "n_trials": self.n_trials,
            "n_target": self.n_target,
            "det_points": [[fa, miss] for fa, miss in self.det_points],
            "histograms": self.histograms,
        }


def _sweep_thresholds(scores: np.ndarray) -> np.ndarray:
    distinct = np.unique(scores)
    return np.concatenate(
        [[distinct[0] - 1.0], (distinct[:-1] + distinct[1:]) / 2.0, [distinct[-1] + 1.0]]
    )


def _rates(thresholds, target_scores, nontarget_scores):
    """False-alarm and miss rates at each threshold (accept iff score >= t)."""
    tgt = np.sort(target_scores)
    non = np.sort(nontarget_scores)
    miss = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    fa = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    return fa, miss


def _split_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    if not (labels.any() and (~labels).any()):
        raise ValueError("EER needs at least one target and one nontarget trial")
    return scores[labels], scores[~labels]


def compute_eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Sweeps score midpoints, picks the threshold minimizing |fa - miss| (ties
    resolved toward the lower threshold) and reports (fa + miss) / 2 there.

    :param scores: per-trial scores, higher = more target-like
    :param labels: per-trial booleans, True for target trials
    """
    target_scores, nontarget_scores = _split_scores(scores, labels)
    thresholds = _sweep_thresholds(np.asarray(scores, dtype=np.float64))
    fa, miss = _rates(thresholds, target_scores, nontarget_scores)
    best = int(np.argmin(np.abs(fa - miss)))
    return float((fa[best] + miss[best]) / 2.0), float(thresholds[best])


def det_points(scores, labels) -> list[tuple[float, float]]:
    """(false-alarm, miss) staircase, one point per swept threshold."""
    target_scores, nontarget_scores = _split_scores(scores, labels)
    thresholds = _sweep_thresholds(np.asarray(scores, dtype=np.float64))
    fa, miss = _rates(thresholds, target_scores, nontarget_scores)
    return [(float(f), float(m)) for f, m in zip(fa, miss)]


def score_histogram(
    score_sets: Mapping[str, Sequence[float]],
    num_bins: int = 30,
    normalize_by_max: bool = True,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Histogram counts per score set over shared bin edges.

    With `normalize_by_max`, every score is divided by the maximum absolute
    score across all provided sets before binning.
    """
    if num_bins < 1:
        raise ValueError("need at least one bin")
    arrays = {name: np.asarray(vals, dtype=np.float64) for name, vals in score_sets.items()}
    if not arrays or any(a.size == 0 for a in arrays.values()):
        raise ValueError("every score set must be non-empty")
    if normalize_by_max:
        peak = max(np.abs(a).max() for a in arrays.values())
        if peak > 0:
            arrays = {name: a / peak for name, a in arrays.items()}
    lo = min(a.min() for a in arrays.values())
    hi = max(a.max() for a in arrays.values())
    if hi == lo:
        hi = lo + 1e-12
    edges = np.linspace(lo, hi, num_bins + 1)
    counts = {name: np.histogram(a, bins=edges)[0] for name, a in arrays.items()}
    return edges, counts


def evaluate_trials(scores, labels, num_bins: int = 30) -> EvalReport:
    """Full report: EER, DET staircase and per-label histograms."""
    labels = np.asarray(labels, dtype=bool)
    eer, threshold = compute_eer(scores, labels)
    det = det_points(scores, labels)
    scores = np.asarray(scores, dtype=np.float64)
    edges, counts = score_histogram(
        {TARGET: scores[labels], NONTARGET: scores[~labels]}, num_bins=num_bins
    )
    histograms = {
        "bin_edges": edges.tolist(),
        "counts": {name: c.tolist() for name, c in counts.items()},
    }
    return EvalReport(
        eer=eer,
        eer_threshold=threshold,
        det_points=det,
        histograms=histograms,
        n_trials=int(scores.size),
        n_target=int(labels.sum()),
    )


def fstat_cosine_report(
    trials: TrialList,
    stats_biased: Mapping[str, BwStats],
    stats_unbiased: Mapping[str, BwStats],
) -> tuple[list[dict], dict[str, dict[str, float]]]:
    """Per-trial cosine distances between first-order statistics.

    Compares the biased statistics (standard accumulation on enhanced
    features) against the unbiased ones (uncertainty-aware accumulation) on
    the same trials.

    :return: (rows, means) where rows have keys enroll/test/label/
        dist_biased/dist_unbiased and means maps label -> variant -> mean
    """
    rows = []
    for enroll, test, label in trials.trials:
        rows.append(
            {
                "enroll": enroll,
                "test": test,
                "label": label,
                "dist_biased": fstat_cosine(stats_biased[enroll], stats_biased[test]),
                "dist_unbiased": fstat_cosine(stats_unbiased[enroll], stats_unbiased[test]),
            }
        )
    means: dict[str, dict[str, float]] = {}
    for label in (TARGET, NONTARGET):
        sel = [r for r in rows if r["label"] == label]
        if sel:
            means[label] = {
                "biased": float(np.mean([r["dist_biased"] for r in sel])),
                "unbiased": float(np.mean([r["dist_unbiased"] for r in sel])),
            }
    return rows, means


def read_trials(path) -> TrialList:
    """One `enroll<TAB>test<TAB>{target|nontarget}` per line."""
    trials = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}: malformed trial line {line!r}")
        trials.append((parts[0], parts[1], parts[2]))
    return TrialList(trials)


def write_trials(path, trials: TrialList) -> None:
    lines = [f"{e}\t{t}\t{label}" for e, t, label in trials.trials]
    Path(path).write_text("\n".join(lines) + "\n")


def write_scores(path, rows: Sequence[tuple[str, str, float, str]]) -> None:
    """CSV with columns enroll_id,test_id,score,label."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["enroll_id", "test_id", "score", "label"])
        for enroll, test, score, label in rows:
            writer.writerow([enroll, test, repr(float(score)), label])


def read_scores(path) -> list[tuple[str, str, float, str]]:
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows or rows[0] != ["enroll_id", "test_id", "score", "label"]:
        raise ValueError(f"{path}: missing scores CSV header")
    return [(r[0], r[1], float(r[2]), r[3]) for r in rows[1:]]
