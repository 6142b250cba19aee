"""I-vector post-processing and trial scoring.

The classification back-end follows the usual embedding recipe: center and
whiten on a training set, length-normalize, optionally project with LDA,
then score verification trials with a two-covariance Gaussian PLDA model
(or plain cosine similarity).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

BACKEND_FORMAT_VERSION = 1
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class WhitenTransform:
    """Centering plus inverse-square-root-of-covariance transform.

    :attr mean: (D,) training mean
    :attr transform: (D, D) symmetric whitening matrix
    """

    mean: np.ndarray
    transform: np.ndarray


@dataclass
class LdaTransform:
    """Linear discriminant projection, columns orthonormal in the
    within-class metric, ordered by descending discriminability."""

    projection: np.ndarray  # (D, R)


@dataclass
class PldaModel:
    """Two-covariance Gaussian PLDA.

    :attr mu: (R,) global mean
    :attr between_cov: (R, R) speaker (between-class) covariance, PSD
    :attr within_cov: (R, R) session (within-class) covariance, PD
    :attr em_log_likelihoods: per-iteration data log-likelihood
    """

    mu: np.ndarray
    between_cov: np.ndarray
    within_cov: np.ndarray
    em_log_likelihoods: tuple = field(default=(), compare=False)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.between_cov = np.asarray(self.between_cov, dtype=np.float64)
        self.within_cov = np.asarray(self.within_cov, dtype=np.float64)
        for mat in (self.between_cov, self.within_cov):
            if not np.allclose(mat, mat.T, atol=1e-10):
                raise ValueError("PLDA covariances must be symmetric")


def fit_whitener(ivectors: np.ndarray) -> WhitenTransform:
    """Fit a symmetric (ZCA) whitening transform.

    The transformed training set has zero mean and identity covariance; a
    ridge is added when the sample covariance is rank-deficient (fewer than
    D+1 vectors or near-zero eigenvalues).
    """
    x = np.asarray(ivectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least 2 vectors to fit a whitener")
    n, d = x.shape
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    if n <= d:
        cov = cov + 1e-8 * (np.trace(cov) / d) * np.eye(d)
    eigvals, eigvecs = np.linalg.eigh(cov)
    floor = 1e-8 * max(eigvals.max(), 1e-30)
    if eigvals.min() < floor:
        eigvals = np.maximum(eigvals, floor)
    transform = (eigvecs / np.sqrt(eigvals)) @ eigvecs.T
    return WhitenTransform(mean, transform)


def apply_whitener(wt: WhitenTransform, ivectors: np.ndarray) -> np.ndarray:
    x = np.asarray(ivectors, dtype=np.float64)
    return (x - wt.mean) @ wt.transform.T


def length_normalize(v: np.ndarray) -> np.ndarray:
    """Project onto the unit sphere; rows are normalized for 2-D input."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise ValueError("cannot length-normalize a zero vector")
        return v / norm
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot length-normalize a zero vector")
    return v / norms


def _scatter_matrices(x: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Between- and within-class scatter (normalized by sample count)."""
    n, _ = x.shape
    overall = x.mean(axis=0)
    classes = sorted(set(labels))
    labels = np.asarray(labels)
    sb = np.zeros((x.shape[1], x.shape[1]))
    sw = np.zeros_like(sb)
    for cls in classes:
        rows = x[labels == cls]
        diff = rows.mean(axis=0) - overall
        sb += rows.shape[0] * np.outer(diff, diff)
        centered = rows - rows.mean(axis=0)
        sw += centered.T @ centered
    return sb / n, sw / n


def fit_lda(ivectors: np.ndarray, labels, r: int) -> LdaTransform:
    """Fisher LDA via the generalized eigenproblem on (between, within) scatter.

    The projection rank is capped at min(D, num_classes - 1); requesting more
    logs a warning and returns the capped transform.  Columns are sorted by
    descending eigenvalue with the first sizeable entry made positive.
    """
    x = np.asarray(ivectors, dtype=np.float64)
    num_classes = len(set(labels))
    cap = min(x.shape[1], num_classes - 1)
    if cap < 1:
        raise ValueError("LDA needs at least 2 classes")
    if r < 1:
        raise ValueError("LDA rank must be >= 1")
    if r > cap:
        logger.warning("requested LDA rank %d exceeds feasible %d; capping", r, cap)
        r = cap
    sb, sw = _scatter_matrices(x, labels)
    ridge = 1e-8 * max(np.trace(sw) / sw.shape[0], 1e-30)
    eigvals, eigvecs = scipy.linalg.eigh(sb, sw + ridge * np.eye(sw.shape[0]))
    order = np.argsort(eigvals)[::-1][:r]
    projection = eigvecs[:, order]
    for col in range(projection.shape[1]):
        column = projection[:, col]
        lead = np.flatnonzero(np.abs(column) > 1e-12 * np.abs(column).max())
        if lead.size and column[lead[0]] < 0:
            projection[:, col] = -column
    return LdaTransform(projection)


def apply_lda(lda: LdaTransform, ivectors: np.ndarray) -> np.ndarray:
    return np.asarray(ivectors, dtype=np.float64) @ lda.projection


def _floor_spd(mat: np.ndarray, rel_floor: float = 1e-8) -> np.ndarray:
    """Clamp eigenvalues so the matrix stays comfortably positive-definite."""
    eigvals, eigvecs = np.linalg.eigh(mat)
    floor = rel_floor * max(eigvals.max(), 1e-30)
    if eigvals.min() >= floor:
        return mat
    eigvals = np.maximum(eigvals, floor)
    return (eigvecs * eigvals) @ eigvecs.T


def train_plda(ivectors: np.ndarray, labels, num_iters: int = 20) -> PldaModel:
    """EM for the two-covariance PLDA model x = mu + s + e.

    Speaker factors s are N(0, between_cov), residuals e are N(0,
    within_cov), both full matrices.  The global mean is fixed to the data
    mean.  Per-iteration total log-likelihood is recorded and is
    non-decreasing (up to the within-covariance floor, which only engages on
    degenerate label sets).
    """
    x = np.asarray(ivectors, dtype=np.float64)
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise ValueError("PLDA training needs at least 2 speakers")
    n, r = x.shape
    mu = x.mean(axis=0)

    groups = []
    for cls in classes:
        rows = x[labels == cls] - mu
        mean_k = rows.mean(axis=0)
        scatter_k = (rows - mean_k).T @ (rows - mean_k)
        groups.append((rows.shape[0], mean_k, scatter_k))

    # moment-based initialization
    class_means = np.stack([g[1] for g in groups])
    between = class_means.T @ class_means / len(groups)
    within = sum(g[2] for g in groups) / n
    between = _floor_spd(between + 1e-6 * np.trace(between + np.eye(r)) / r * np.eye(r))
    within = _floor_spd(within + 1e-6 * np.trace(within + np.eye(r)) / r * np.eye(r))

    history = []
    for _ in range(num_iters):
        between_inv = np.linalg.inv(between)
        within_inv = np.linalg.inv(within)
        loglik = 0.0
        acc_between = np.zeros((r, r))
        acc_within = np.zeros((r, r))
        for n_k, mean_k, scatter_k in groups:
            post_prec = between_inv + n_k * within_inv
            post_cov = np.linalg.inv(post_prec)
            info = n_k * (within_inv @ mean_k)
            post_mean = post_cov @ info

            s, logdet_w = np.linalg.slogdet(within)
            _, logdet_b = np.linalg.slogdet(between)
            _, logdet_p = np.linalg.slogdet(post_prec)
            loglik += (
                -0.5 * n_k * r * _LOG_2PI
                - 0.5 * n_k * logdet_w
                - 0.5 * np.trace(within_inv @ scatter_k)
                - 0.5 * n_k * mean_k @ within_inv @ mean_k
                + 0.5 * info @ post_mean
                - 0.5 * logdet_p
                - 0.5 * logdet_b
            )

            acc_between += np.outer(post_mean, post_mean) + post_cov
            resid = mean_k - post_mean
            acc_within += scatter_k + n_k * (np.outer(resid, resid) + post_cov)
        history.append(float(loglik))

        between = _floor_spd(acc_between / len(groups))
        within = _floor_spd(acc_within / n)

    between = 0.5 * (between + between.T)
    within = 0.5 * (within + within.T)
    return PldaModel(mu, between, within, em_log_likelihoods=tuple(history))


def _plda_score_terms(model: PldaModel):
    """Quadratic forms and constant for the verification LLR.

    In the rotated coordinates u = (e + t)/sqrt(2), v = (e - t)/sqrt(2) the
    same-speaker covariance is blockdiag(W + 2B, W) and the
    different-speaker covariance is blockdiag(W + B, W + B).
    """
    total = model.within_cov + model.between_cov
    sum_cov = total + model.between_cov
    diff_cov = total - model.between_cov
    total_inv = np.linalg.inv(total)
    q_sum = total_inv - np.linalg.inv(sum_cov)
    q_diff = total_inv - np.linalg.inv(diff_cov)
    _, logdet_total = np.linalg.slogdet(total)
    _, logdet_sum = np.linalg.slogdet(sum_cov)
    _, logdet_diff = np.linalg.slogdet(diff_cov)
    const = 2.0 * logdet_total - logdet_sum - logdet_diff
    return q_sum, q_diff, const


def score_plda_trials(model: PldaModel, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
    """Verification log-likelihood ratios for paired rows of enroll/test."""
    e = np.atleast_2d(np.asarray(enroll, dtype=np.float64)) - model.mu
    t = np.atleast_2d(np.asarray(test, dtype=np.float64)) - model.mu
    if e.shape != t.shape:
        raise ValueError("enroll/test shapes differ")
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(t))):
        raise ValueError("non-finite inputs")
    q_sum, q_diff, const = _plda_score_terms(model)
    u = (e + t) / np.sqrt(2.0)
    v = (e - t) / np.sqrt(2.0)
    quad = np.sum((u @ q_sum) * u, axis=1) + np.sum((v @ q_diff) * v, axis=1)
    return 0.5 * (quad + const)


def score_plda(model: PldaModel, enroll: np.ndarray, test: np.ndarray) -> float:
    """Same-speaker vs different-speaker LLR for a single trial (symmetric)."""
    return float(score_plda_trials(model, enroll[None, :], test[None, :])[0])


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; scale-invariant, 1 for identical directions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine score undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


def save_backend(path, whitener: WhitenTransform, plda: PldaModel, lda: LdaTransform | None = None):
    """Write the fitted back-end as one JSON document."""
    doc = {
        "format_version": BACKEND_FORMAT_VERSION,
        "whitener": {"mean": whitener.mean.tolist(), "transform": whitener.transform.tolist()},
        "plda": {
            "mu": plda.mu.tolist(),
            "between_cov": plda.between_cov.tolist(),
            "within_cov": plda.within_cov.tolist(),
        },
        "lda": None if lda is None else {"projection": lda.projection.tolist()},
    }
    Path(path).write_text(json.dumps(doc))


def load_backend(path) -> tuple[WhitenTransform, PldaModel, LdaTransform | None]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != BACKEND_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported backend format version")
    whitener = WhitenTransform(
        np.array(doc["whitener"]["mean"]), np.array(doc["whitener"]["transform"])
    )
    plda = PldaModel(
        np.array(doc["plda"]["mu"]),
        np.array(doc["plda"]["between_cov"]),
        np.array(doc["plda"]["within_cov"]),
    )
    lda = None
    if doc.get("lda") is not None:
        lda = LdaTransform(np.array(doc["lda"]["projection"]))
    return whitener, plda, lda
