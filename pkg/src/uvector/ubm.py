"""Diagonal-covariance GMM training and per-frame component posteriors.

Posteriors come in two flavours: the standard ones evaluated with the model
covariances, and uncertainty-aware ones where each frame's diagonal
uncertainty is added to every component covariance before evaluating the
densities.  Both run through the same log-domain code path, so zero
uncertainty reproduces the standard posteriors bit for bit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .frontend import FeatureMatrix, UncertaintySequence

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-4
GMM_FORMAT_VERSION = 1

_LOG_2PI = np.log(2.0 * np.pi)
_BLOCK = 1024


@dataclass
class GmmModel:
    """Universal background model with diagonal covariances.

    :attr weights: (C,) mixture weights, summing to one
    :attr means: (C, F) component means
    :attr diag_covs: (C, F) diagonal covariances
    :attr em_log_likelihoods: total data log-likelihood after each EM
        iteration (training diagnostic, empty for hand-built models)
    """

    weights: np.ndarray
    means: np.ndarray
    diag_covs: np.ndarray
    em_log_likelihoods: tuple = field(default=(), compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.diag_covs = np.asarray(self.diag_covs, dtype=np.float64)
        if self.means.ndim != 2:
            raise ValueError("means must be C x F")
        c, f = self.means.shape
        if self.weights.shape != (c,) or self.diag_covs.shape != (c, f):
            raise ValueError("inconsistent GMM shapes")
        if not (
            np.all(np.isfinite(self.weights))
            and np.all(np.isfinite(self.means))
            and np.all(np.isfinite(self.diag_covs))
        ):
            raise ValueError("GMM parameters contain NaN/Inf")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1 within 1e-12")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if np.any(self.diag_covs < VAR_FLOOR):
            raise ValueError(f"variances must be >= {VAR_FLOOR}")

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class FramePosteriors:
    """Per-frame component posteriors and log-likelihoods.

    :attr gammas: (L, C) row-stochastic responsibility matrix
    :attr log_likelihoods: (L,) per-frame total log-density
    """

    gammas: np.ndarray
    log_likelihoods: np.ndarray


def _posterior_block(frames, log_weights, means, diag_covs, diag_unc):
    """Responsibilities for one block of frames.

    `diag_unc` is an (L, F) block of per-frame uncertainties; the effective
    covariance of component c at frame t is diag_covs[c] + diag_unc[t].
    """
    # (L, C, F) effective variances and squared residuals, built in place
    var = diag_covs[None, :, :] + diag_unc[:, None, :]
    work = frames[:, None, :] - means[None, :, :]
    work *= work
    work /= var
    np.log(var, out=var)
    work += var
    log_p = log_weights[None, :] - 0.5 * (work.sum(axis=2) + means.shape[1] * _LOG_2PI)
    peak = log_p.max(axis=1, keepdims=True)
    unnorm = np.exp(log_p - peak)
    total = unnorm.sum(axis=1, keepdims=True)
    ll = peak[:, 0] + np.log(total[:, 0])
    return unnorm / total, ll


def _frame_posteriors(gmm: GmmModel, frames: np.ndarray, diag_unc: np.ndarray) -> FramePosteriors:
    length = frames.shape[0]
    log_weights = np.log(np.maximum(gmm.weights, 1e-300))
    gammas = np.empty((length, gmm.num_components))
    lls = np.empty(length)
    for start in range(0, length, _BLOCK):
        stop = min(start + _BLOCK, length)
        gammas[start:stop], lls[start:stop] = _posterior_block(
            frames[start:stop], log_weights, gmm.means, gmm.diag_covs, diag_unc[start:stop]
        )
    return FramePosteriors(gammas, lls)


def posteriors(gmm: GmmModel, fm: FeatureMatrix) -> FramePosteriors:
    """Component posteriors of every frame under the UBM.

    Computed in the log domain with per-frame max subtraction; rows of the
    result sum to one.
    """
    if fm.dim != gmm.dim:
        raise ValueError(f"feature dim {fm.dim} != model dim {gmm.dim}")
    zero_unc = np.zeros_like(fm.frames)
    return _frame_posteriors(gmm, fm.frames, zero_unc)


def posteriors_uncertain(
    gmm: GmmModel, fm: FeatureMatrix, unc: UncertaintySequence
) -> FramePosteriors:
    """Uncertainty-aware posteriors: densities use diag_covs + per-frame uncertainty.

    With all-zero uncertainty this is identical to `posteriors` (same code
    path, zero tolerance).
    """
    if fm.dim != gmm.dim:
        raise ValueError(f"feature dim {fm.dim} != model dim {gmm.dim}")
    if unc.diag_vars.shape != fm.frames.shape:
        raise ValueError("uncertainty shape must match features")
    if np.any(unc.diag_vars < 0):
        raise ValueError("uncertainty entries must be nonnegative")
    return _frame_posteriors(gmm, fm.frames, unc.diag_vars)


def _fast_log_densities(frames, gmm: GmmModel) -> np.ndarray:
    """(L, C) log π_c + log N(y | m_c, Σ_c) via matmuls (training fast path)."""
    inv_var = 1.0 / gmm.diag_covs
    const = (
        np.log(np.maximum(gmm.weights, 1e-300))
        - 0.5 * np.sum(_LOG_2PI + np.log(gmm.diag_covs), axis=1)
        - 0.5 * np.sum(gmm.means**2 * inv_var, axis=1)
    )
    return const[None, :] + frames @ (gmm.means * inv_var).T - 0.5 * (frames**2) @ inv_var.T


def _kmeans_pp_init(data: np.ndarray, num_components: int, rng: np.random.Generator):
    """k-means++ seeding followed by two Lloyd iterations."""
    n = data.shape[0]
    centers = [data[rng.integers(n)]]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for _ in range(1, num_components):
        if d2.sum() > 0:
            centers.append(data[rng.choice(n, p=d2 / d2.sum())])
        else:
            centers.append(data[rng.integers(n)])
        d2 = np.minimum(d2, np.sum((data - centers[-1]) ** 2, axis=1))
    centers = np.array(centers)

    for _ in range(2):
        dists = (
            np.sum(data**2, axis=1)[:, None]
            - 2.0 * data @ centers.T
            + np.sum(centers**2, axis=1)[None, :]
        )
        assign = dists.argmin(axis=1)
        for c in range(num_components):
            sel = assign == c
            if np.any(sel):
                centers[c] = data[sel].mean(axis=0)
    return centers, assign


def train_ubm(
    features: Iterable[FeatureMatrix],
    num_components: int,
    num_iters: int = 10,
    seed: int = 0,
) -> GmmModel:
    """EM training of a diagonal-covariance GMM on voiced frames.

    Initialization is k-means++ seeding plus two k-means iterations; the
    variance floor is applied after every M-step.  Components that collapse
    are reseeded from a random frame (logged) rather than crashing.

    :return: GmmModel with `em_log_likelihoods` holding the per-iteration
        total log-likelihood (non-decreasing up to 1e-8 relative).
    """
    data = np.vstack([fm.voiced() for fm in features])
    n, dim = data.shape
    if n < 10 * num_components:
        raise ValueError(f"need >= {10 * num_components} voiced frames, got {n}")

    rng = np.random.default_rng(seed)
    centers, assign = _kmeans_pp_init(data, num_components, rng)

    global_var = np.maximum(data.var(axis=0), VAR_FLOOR)
    weights = np.full(num_components, 1.0 / num_components)
    variances = np.tile(global_var, (num_components, 1))
    for c in range(num_components):
        sel = assign == c
        if sel.sum() >= 2:
            weights[c] = sel.mean()
            variances[c] = np.maximum(data[sel].var(axis=0), VAR_FLOOR)
    weights /= weights.sum()
    gmm = GmmModel(weights, centers, variances)

    history = []
    for _ in range(num_iters):
        log_p = _fast_log_densities(data, gmm)
        peak = log_p.max(axis=1, keepdims=True)
        unnorm = np.exp(log_p - peak)
        total = unnorm.sum(axis=1, keepdims=True)
        gammas = unnorm / total
        history.append(float(np.sum(peak[:, 0] + np.log(total[:, 0]))))

        counts = gammas.sum(axis=0)
        for c in np.flatnonzero(counts < 1e-6):
            logger.warning("reseeding empty UBM component %d", c)
            pick = rng.integers(n)
            gammas[:, c] = 0.0
            gammas[pick, c] = 1.0
            gammas[pick] /= gammas[pick].sum()
            counts = gammas.sum(axis=0)

        weights = counts / counts.sum()
        means = (gammas.T @ data) / counts[:, None]
        second = (gammas.T @ (data**2)) / counts[:, None]
        variances = np.maximum(second - means**2, VAR_FLOOR)
        gmm = GmmModel(weights, means, variances)

    return GmmModel(gmm.weights, gmm.means, gmm.diag_covs, em_log_likelihoods=tuple(history))


def save_gmm(path, gmm: GmmModel) -> None:
    """Write the model as JSON (arrays of weights, means, covariances)."""
    doc = {
        "format_version": GMM_FORMAT_VERSION,
        "num_components": gmm.num_components,
        "dim": gmm.dim,
        "weights": gmm.weights.tolist(),
        "means": gmm.means.tolist(),
        "diag_covs": gmm.diag_covs.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_gmm(path) -> GmmModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != GMM_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported GMM format version")
    return GmmModel(
        np.array(doc["weights"]), np.array(doc["means"]), np.array(doc["diag_covs"])
    )
