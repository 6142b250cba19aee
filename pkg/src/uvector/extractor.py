"""Total-variability model training and i-vector extraction.

Every method variant funnels into the same posterior solve: the i-vector is
the mean of a Gaussian posterior with precision I + T' N~ T and information
vector T' F~, where (N~, F~) are normalized statistics from one of the
accumulators in `uvector.stats`.  Training is EM over the loading matrix T
with the residual covariance fixed to the UBM covariance.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from .frontend import FeatureMatrix, UncertaintySequence
from .stats import (
    BwStats,
    NormalizedStats,
    accumulate_fa_uncertain,
    accumulate_proposed,
    accumulate_standard,
    accumulate_ubm_uncertain,
    normalize_stats,
)
from .ubm import GmmModel

logger = logging.getLogger(__name__)

TV_MAGIC = b"UVTV"
TV_FORMAT_VERSION = 1


@dataclass
class TvModel:
    """Total-variability model.

    :attr t_matrix: (C, F, D) loading matrix, component c's block is (F, D)
    :attr v_diag: (C, F) diagonal residual covariance blocks
    :attr em_auxiliary: per-iteration EM objective (training diagnostic)
    """

    t_matrix: np.ndarray
    v_diag: np.ndarray
    em_auxiliary: tuple = field(default=(), compare=False)

    def __post_init__(self):
        self.t_matrix = np.asarray(self.t_matrix, dtype=np.float64)
        self.v_diag = np.asarray(self.v_diag, dtype=np.float64)
        if self.t_matrix.ndim != 3:
            raise ValueError("t_matrix must be (C, F, D)")
        c, f, d = self.t_matrix.shape
        if self.v_diag.shape != (c, f):
            raise ValueError("v_diag must be (C, F)")
        if d > c * f:
            raise ValueError("ivector dimension cannot exceed C*F")
        if np.any(self.v_diag <= 0):
            raise ValueError("residual covariance must be strictly positive")
        if not (np.all(np.isfinite(self.t_matrix)) and np.all(np.isfinite(self.v_diag))):
            raise ValueError("model contains NaN/Inf")

    @property
    def num_components(self) -> int:
        return self.t_matrix.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.t_matrix.shape[1]

    @property
    def ivector_dim(self) -> int:
        return self.t_matrix.shape[2]


@dataclass
class IVector:
    """Posterior mean of the total factors, optionally with its precision."""

    mean: np.ndarray
    precision: np.ndarray | None = None
    utt_id: str = ""


def _solve_spd(mat: np.ndarray, rhs: np.ndarray):
    """Solve a symmetric positive-definite system, with a logged ridge fallback.

    Returns (solution, cho_factor) so callers can reuse the factorization.
    """
    try:
        factor = scipy.linalg.cho_factor(mat, lower=True)
    except scipy.linalg.LinAlgError:
        ridge = 1e-10 * np.trace(mat) / mat.shape[0]
        logger.warning("SPD factorization failed; adding ridge %.3e", ridge)
        factor = scipy.linalg.cho_factor(mat + ridge * np.eye(mat.shape[0]), lower=True)
    return scipy.linalg.cho_solve(factor, rhs), factor


def extract(tv: TvModel, nstats: NormalizedStats, with_precision: bool = False) -> IVector:
    """Posterior mean of the total factors from normalized statistics.

    Solves (I + T' N~ T) w = T' F~ via Cholesky factorization.
    """
    c, f, d = tv.t_matrix.shape
    if nstats.n_tilde.shape != (c, f):
        raise ValueError("statistics do not match model dimensions")
    if not (np.all(np.isfinite(nstats.n_tilde)) and np.all(np.isfinite(nstats.f_tilde))):
        raise ValueError("non-finite statistics")
    t2 = tv.t_matrix.reshape(c * f, d)
    weights = nstats.n_tilde.reshape(c * f)
    precision = np.eye(d) + t2.T @ (weights[:, None] * t2)
    info = t2.T @ nstats.f_tilde.reshape(c * f)
    mean, _ = _solve_spd(precision, info)
    return IVector(mean, precision if with_precision else None, utt_id=nstats.utt_id)


def extract_direct(tv: TvModel, stats: BwStats, with_precision: bool = False) -> IVector:
    """Baseline solve assembled directly from unnormalized statistics.

    Builds (I + T' V^-1 N T) w = T' V^-1 F_hat without forming normalized
    statistics first; agrees with `extract` on the normalized form to
    solver precision.
    """
    c, f, d = tv.t_matrix.shape
    if stats.f_hat.shape != (c, f):
        raise ValueError("statistics do not match model dimensions")
    precision = np.eye(d)
    info = np.zeros(d)
    for ci in range(c):
        t_block = tv.t_matrix[ci]
        scaled = t_block / tv.v_diag[ci][:, None]
        precision += stats.n[ci] * (t_block.T @ scaled)
        info += scaled.T @ stats.f_hat[ci]
    mean, _ = _solve_spd(precision, info)
    return IVector(mean, precision if with_precision else None, utt_id=stats.utt_id)


def extract_baseline(
    tv: TvModel, gmm: GmmModel, fm: FeatureMatrix, with_precision: bool = False
) -> IVector:
    """Conventional i-vector: standard statistics, conventional normalization."""
    return extract(tv, normalize_stats(gmm, accumulate_standard(gmm, fm)), with_precision)


def extract_fa_uncertain(
    tv: TvModel,
    gmm: GmmModel,
    fm: FeatureMatrix,
    unc: UncertaintySequence,
    with_precision: bool = False,
) -> IVector:
    """Factor-analysis-side propagation (biased posteriors, inflated normalization)."""
    return extract(tv, accumulate_fa_uncertain(gmm, fm, unc), with_precision)


def extract_ubm_uncertain(
    tv: TvModel,
    gmm: GmmModel,
    fm: FeatureMatrix,
    unc: UncertaintySequence,
    with_precision: bool = False,
) -> IVector:
    """UBM-side propagation: unbiased Wiener-filtered statistics fed to the
    baseline solve (extraction treated as a deterministic operation)."""
    return extract(tv, normalize_stats(gmm, accumulate_ubm_uncertain(gmm, fm, unc)), with_precision)


def extract_proposed(
    tv: TvModel,
    gmm: GmmModel,
    fm: FeatureMatrix,
    unc: UncertaintySequence,
    with_precision: bool = False,
) -> IVector:
    """Combined propagation: unbiased statistics and inflated normalization."""
    return extract(tv, accumulate_proposed(gmm, fm, unc), with_precision)


def train_tv(
    stats: Sequence[BwStats],
    gmm: GmmModel,
    ivector_dim: int,
    num_iters: int = 10,
    seed: int = 0,
) -> TvModel:
    """EM training of the total-variability matrix on standard statistics.

    The E-step solves each utterance's posterior; the M-step solves one
    D x D least-squares system per component row block.  The residual
    covariance is fixed to the UBM covariance throughout (no re-estimation,
    no minimum-divergence step).

    :return: TvModel with `em_auxiliary` holding the per-iteration marginal
        objective (non-decreasing up to 1e-6 relative).
    """
    num_utts = len(stats)
    if num_utts < ivector_dim / 4:
        raise ValueError(f"need at least {ivector_dim / 4:.0f} utterances for D={ivector_dim}")
    c, f = gmm.means.shape
    d = ivector_dim
    if d > c * f:
        raise ValueError("ivector dimension cannot exceed C*F")

    n_all = np.stack([s.n for s in stats])  # (U, C)
    inv_v = 1.0 / gmm.diag_covs
    weights_all = (n_all[:, :, None] * inv_v[None, :, :]).reshape(num_utts, c * f)
    f_hat_flat = np.stack([s.f_hat.reshape(c * f) for s in stats])  # (U, CF)
    f_tilde_flat = f_hat_flat * inv_v.reshape(c * f)[None, :]

    rng = np.random.default_rng(seed)
    t2 = rng.normal(0.0, 0.01, size=(c * f, d))

    # rows of the supervector processed per matmul block (memory bound)
    row_block = max(1, (1 << 22) // (d * d))

    history = []
    eye = np.eye(d)
    for _ in range(num_iters):
        # E-step, batched over utterances
        precisions = np.broadcast_to(eye, (num_utts, d, d)).copy()
        for start in range(0, c * f, row_block):
            stop = min(start + row_block, c * f)
            block = t2[start:stop]
            outer = (block[:, :, None] * block[:, None, :]).reshape(stop - start, d * d)
            precisions += (weights_all[:, start:stop] @ outer).reshape(num_utts, d, d)
        infos = f_tilde_flat @ t2  # (U, D)
        means = np.linalg.solve(precisions, infos[:, :, None])[:, :, 0]
        covs = np.linalg.inv(precisions)
        sign, logdets = np.linalg.slogdet(precisions)
        if np.any(sign <= 0):
            raise FloatingPointError("posterior precision lost positive-definiteness")
        aux = 0.5 * float(np.sum(infos * means) - logdets.sum())
        history.append(aux)

        # M-step: per-component row-block least squares on the raw statistics
        second = covs + means[:, :, None] * means[:, None, :]  # (U, D, D)
        acc_a = np.einsum("uc,ude->cde", n_all, second)
        acc_rhs = (f_hat_flat.T @ means).reshape(c, f, d)
        t_new = np.empty((c, f, d))
        for ci in range(c):
            try:
                t_new[ci] = scipy.linalg.solve(acc_a[ci], acc_rhs[ci].T, assume_a="pos").T
            except scipy.linalg.LinAlgError:
                logger.warning("rank-deficient TV accumulator for component %d; adding ridge", ci)
                t_new[ci] = scipy.linalg.solve(
                    acc_a[ci] + 1e-8 * np.eye(d), acc_rhs[ci].T, assume_a="pos"
                ).T
        t2 = t_new.reshape(c * f, d)

    return TvModel(t2.reshape(c, f, d), gmm.diag_covs.copy(), em_auxiliary=tuple(history))


_TV_HEADER = struct.Struct("<4sIQQQ")


def save_tv(path, tv: TvModel) -> None:
    payload = _TV_HEADER.pack(
        TV_MAGIC, TV_FORMAT_VERSION, tv.num_components, tv.feature_dim, tv.ivector_dim
    )
    payload += np.ascontiguousarray(tv.t_matrix, dtype="<f8").tobytes()
    payload += np.ascontiguousarray(tv.v_diag, dtype="<f8").tobytes()
    Path(path).write_bytes(payload)


def load_tv(path) -> TvModel:
    raw = Path(path).read_bytes()
    if len(raw) < _TV_HEADER.size:
        raise ValueError(f"{path}: truncated model file")
    magic, version, c, f, d = _TV_HEADER.unpack_from(raw)
    if magic != TV_MAGIC or version != TV_FORMAT_VERSION:
        raise ValueError(f"{path}: bad magic or version")
    need = _TV_HEADER.size + 8 * (c * f * d + c * f)
    if len(raw) < need:
        raise ValueError(f"{path}: truncated model file")
    t_mat = np.frombuffer(raw, dtype="<f8", count=c * f * d, offset=_TV_HEADER.size)
    v_diag = np.frombuffer(raw, dtype="<f8", count=c * f, offset=_TV_HEADER.size + 8 * c * f * d)
    return TvModel(t_mat.reshape(c, f, d).copy(), v_diag.reshape(c, f).copy())


def write_ivectors(path, ivectors: Sequence[IVector]) -> None:
    """CSV with header utt_id,w_0..w_{D-1}."""
    if not ivectors:
        raise ValueError("no i-vectors to write")
    d = ivectors[0].mean.shape[0]
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["utt_id"] + [f"w_{i}" for i in range(d)])
        for iv in ivectors:
            writer.writerow([iv.utt_id] + [repr(float(x)) for x in iv.mean])


def read_ivectors(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows or not rows[0] or rows[0][0] != "utt_id":
        raise ValueError(f"{path}: missing i-vector CSV header")
    ids = [row[0] for row in rows[1:]]
    mat = np.array([[float(x) for x in row[1:]] for row in rows[1:]])
    return ids, mat
