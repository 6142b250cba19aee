"""Baum-Welch sufficient statistics in their four variants.

Four accumulators cover the baseline and the three uncertainty-propagation
schemes compared in this package:

* `accumulate_standard`: zeroth/first-order statistics with standard
  posteriors (the baseline; combine with `normalize_stats`).
* `accumulate_fa_uncertain`: factor-analysis-side propagation; standard
  (biased) posteriors, per-frame normalization by the inflated residual
  covariance V_c plus the frame uncertainty.
* `accumulate_ubm_uncertain`: UBM-side propagation; uncertainty-aware
  posteriors and Wiener-filtered residuals, conventional normalization.
* `accumulate_proposed`: both at once; uncertainty-aware posteriors,
  Wiener-filtered residuals, per-frame inflated normalization.

All accumulators are plain sums over voiced frames, so partial statistics
merge associatively (`merge_stats`).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .frontend import FeatureMatrix, UncertaintySequence
from .ubm import GmmModel, posteriors, posteriors_uncertain

STATS_MAGIC = b"UVST"
STATS_FORMAT_VERSION = 1
_TAG_RAW = 0
_TAG_NORMALIZED = 1

_BLOCK = 512


@dataclass
class BwStats:
    """Unnormalized statistics: per-component soft counts and residual sums.

    :attr n: (C,) zeroth-order statistics
    :attr f_hat: (C, F) centralized first-order statistics
    """

    n: np.ndarray
    f_hat: np.ndarray
    utt_id: str = ""

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.float64)
        self.f_hat = np.asarray(self.f_hat, dtype=np.float64)
        if self.f_hat.ndim != 2 or self.n.shape != (self.f_hat.shape[0],):
            raise ValueError("inconsistent statistic shapes")
        if not (np.all(np.isfinite(self.n)) and np.all(np.isfinite(self.f_hat))):
            raise ValueError("statistics contain NaN/Inf")
        if np.any(self.n < 0):
            raise ValueError("zeroth-order statistics must be nonnegative")


@dataclass
class NormalizedStats:
    """Covariance-normalized statistics, diagonal blocks stored as C x F.

    :attr n_tilde: (C, F) diagonal of each normalized zeroth-order block
    :attr f_tilde: (C, F) normalized first-order statistics
    """

    n_tilde: np.ndarray
    f_tilde: np.ndarray
    utt_id: str = ""

    def __post_init__(self):
        self.n_tilde = np.asarray(self.n_tilde, dtype=np.float64)
        self.f_tilde = np.asarray(self.f_tilde, dtype=np.float64)
        if self.n_tilde.ndim != 2 or self.n_tilde.shape != self.f_tilde.shape:
            raise ValueError("inconsistent statistic shapes")
        if not (np.all(np.isfinite(self.n_tilde)) and np.all(np.isfinite(self.f_tilde))):
            raise ValueError("statistics contain NaN/Inf")
        if np.any(self.n_tilde < 0):
            raise ValueError("normalized zeroth-order entries must be nonnegative")


def _check_pair(gmm: GmmModel, fm: FeatureMatrix, unc: UncertaintySequence | None):
    if fm.dim != gmm.dim:
        raise ValueError(f"feature dim {fm.dim} != model dim {gmm.dim}")
    if unc is not None:
        if unc.diag_vars.shape != fm.frames.shape:
            raise ValueError("uncertainty shape must match features")
        if np.any(unc.diag_vars < 0):
            raise ValueError("uncertainty entries must be nonnegative")
    if not np.any(fm.vad_mask):
        raise ValueError(f"utterance {fm.utt_id!r} has no voiced frames")


def _standard_sums(gmm: GmmModel, y: np.ndarray, gam: np.ndarray):
    n = np.zeros(gmm.num_components)
    f_hat = np.zeros((gmm.num_components, gmm.dim))
    for start in range(0, y.shape[0], _BLOCK):
        stop = min(start + _BLOCK, y.shape[0])
        g = gam[start:stop]
        diff = y[start:stop, None, :] - gmm.means[None, :, :]
        n += g.sum(axis=0)
        f_hat += np.einsum("lc,lcf->cf", g, diff)
    return n, f_hat


def accumulate_standard(gmm: GmmModel, fm: FeatureMatrix) -> BwStats:
    """Zeroth/first-order statistics over voiced frames.

    N_c = sum_t gamma_t(c); F_hat_c = sum_t gamma_t(c) (y_t - m_c).
    The N_c sum to the voiced-frame count.
    """
    _check_pair(gmm, fm, None)
    gam = posteriors(gmm, fm).gammas[fm.vad_mask]
    n, f_hat = _standard_sums(gmm, fm.voiced(), gam)
    return BwStats(n, f_hat, utt_id=fm.utt_id)


def normalize_stats(gmm: GmmModel, stats: BwStats, unc=None) -> NormalizedStats:
    """Divide statistics by the residual covariance (V_c = UBM covariance).

    Per-frame uncertainty cannot be folded into already-summed statistics;
    use `accumulate_fa_uncertain` / `accumulate_proposed` for that.
    """
    if unc is not None:
        raise ValueError(
            "normalize_stats cannot apply per-frame uncertainty to summed "
            "statistics; use the uncertainty accumulators instead"
        )
    if stats.f_hat.shape != gmm.means.shape:
        raise ValueError("statistics do not match model dimensions")
    v = gmm.diag_covs
    return NormalizedStats(stats.n[:, None] / v, stats.f_hat / v, utt_id=stats.utt_id)


def _fa_sums(gmm: GmmModel, y: np.ndarray, s_bar: np.ndarray, gam: np.ndarray):
    n_tilde = np.zeros((gmm.num_components, gmm.dim))
    f_tilde = np.zeros((gmm.num_components, gmm.dim))
    for start in range(0, y.shape[0], _BLOCK):
        stop = min(start + _BLOCK, y.shape[0])
        g = gam[start:stop]
        inv_v = 1.0 / (gmm.diag_covs[None, :, :] + s_bar[start:stop, None, :])
        diff = y[start:stop, None, :] - gmm.means[None, :, :]
        n_tilde += np.einsum("lc,lcf->cf", g, inv_v)
        f_tilde += np.einsum("lc,lcf->cf", g, inv_v * diff)
    return n_tilde, f_tilde


def accumulate_fa_uncertain(
    gmm: GmmModel, fm: FeatureMatrix, unc: UncertaintySequence
) -> NormalizedStats:
    """Factor-analysis-side propagation.

    Posteriors are the standard ones evaluated at the enhanced features
    (biased: the uncertainty does not enter the responsibilities); each
    frame's contribution is divided by V_c plus the frame uncertainty.
    """
    _check_pair(gmm, fm, unc)
    gam = posteriors(gmm, fm).gammas[fm.vad_mask]
    n_tilde, f_tilde = _fa_sums(gmm, fm.voiced(), unc.diag_vars[fm.vad_mask], gam)
    return NormalizedStats(n_tilde, f_tilde, utt_id=fm.utt_id)


def _ubm_sums(gmm: GmmModel, y: np.ndarray, s_bar: np.ndarray, gam: np.ndarray):
    n = np.zeros(gmm.num_components)
    f_hat = np.zeros((gmm.num_components, gmm.dim))
    for start in range(0, y.shape[0], _BLOCK):
        stop = min(start + _BLOCK, y.shape[0])
        g = gam[start:stop]
        gain = gmm.diag_covs[None, :, :] / (gmm.diag_covs[None, :, :] + s_bar[start:stop, None, :])
        diff = y[start:stop, None, :] - gmm.means[None, :, :]
        n += g.sum(axis=0)
        f_hat += np.einsum("lc,lcf->cf", g, gain * diff)
    return n, f_hat


def accumulate_ubm_uncertain(
    gmm: GmmModel, fm: FeatureMatrix, unc: UncertaintySequence
) -> BwStats:
    """UBM-side propagation.

    Responsibilities come from the uncertainty-aware posteriors; residuals
    are shrunk by the per-frame Wiener gain before summing.  The zeroth-order
    statistics still sum to the voiced-frame count.
    """
    _check_pair(gmm, fm, unc)
    gam = posteriors_uncertain(gmm, fm, unc).gammas[fm.vad_mask]
    n, f_hat = _ubm_sums(gmm, fm.voiced(), unc.diag_vars[fm.vad_mask], gam)
    return BwStats(n, f_hat, utt_id=fm.utt_id)


def _proposed_sums(gmm: GmmModel, y: np.ndarray, s_bar: np.ndarray, gam: np.ndarray):
    n_tilde = np.zeros((gmm.num_components, gmm.dim))
    f_tilde = np.zeros((gmm.num_components, gmm.dim))
    for start in range(0, y.shape[0], _BLOCK):
        stop = min(start + _BLOCK, y.shape[0])
        g = gam[start:stop]
        v_unc = gmm.diag_covs[None, :, :] + s_bar[start:stop, None, :]
        inv_v = 1.0 / v_unc
        gain = gmm.diag_covs[None, :, :] * inv_v
        diff = y[start:stop, None, :] - gmm.means[None, :, :]
        n_tilde += np.einsum("lc,lcf->cf", g, inv_v)
        f_tilde += np.einsum("lc,lcf->cf", g, inv_v * gain * diff)
    return n_tilde, f_tilde


def accumulate_proposed(
    gmm: GmmModel, fm: FeatureMatrix, unc: UncertaintySequence
) -> NormalizedStats:
    """Combined propagation: unbiased posteriors with inflated normalization.

    Responsibilities come from the uncertainty-aware posteriors; each frame
    is both Wiener-filtered and divided by V_c plus the frame uncertainty.
    """
    _check_pair(gmm, fm, unc)
    gam = posteriors_uncertain(gmm, fm, unc).gammas[fm.vad_mask]
    n_tilde, f_tilde = _proposed_sums(gmm, fm.voiced(), unc.diag_vars[fm.vad_mask], gam)
    return NormalizedStats(n_tilde, f_tilde, utt_id=fm.utt_id)


def accumulate_variants(gmm: GmmModel, fm: FeatureMatrix, unc: UncertaintySequence) -> dict:
    """All four statistic variants of one utterance, sharing posterior passes.

    Computes the standard responsibilities once (for the standard and
    factor-analysis variants) and the uncertainty-aware ones once (for the
    UBM-side and combined variants); numerically identical to calling the
    four accumulators separately.
    """
    _check_pair(gmm, fm, unc)
    y = fm.voiced()
    s_bar = unc.diag_vars[fm.vad_mask]
    gam = posteriors(gmm, fm).gammas[fm.vad_mask]
    gam_unc = posteriors_uncertain(gmm, fm, unc).gammas[fm.vad_mask]
    n_std, f_std = _standard_sums(gmm, y, gam)
    n_fa, f_fa = _fa_sums(gmm, y, s_bar, gam)
    n_ubm, f_ubm = _ubm_sums(gmm, y, s_bar, gam_unc)
    n_prop, f_prop = _proposed_sums(gmm, y, s_bar, gam_unc)
    return {
        "standard": BwStats(n_std, f_std, utt_id=fm.utt_id),
        "fa": NormalizedStats(n_fa, f_fa, utt_id=fm.utt_id),
        "ubm": BwStats(n_ubm, f_ubm, utt_id=fm.utt_id),
        "proposed": NormalizedStats(n_prop, f_prop, utt_id=fm.utt_id),
    }


def wiener_gain(sigma_c: np.ndarray, sigma_bar_t: np.ndarray) -> np.ndarray:
    """Per-dimension shrinkage sigma / (sigma + uncertainty), in (0, 1]."""
    sigma_c = np.asarray(sigma_c, dtype=np.float64)
    sigma_bar_t = np.asarray(sigma_bar_t, dtype=np.float64)
    if np.any(sigma_c <= 0):
        raise ValueError("model variances must be strictly positive")
    if np.any(sigma_bar_t < 0):
        raise ValueError("uncertainties must be nonnegative")
    return sigma_c / (sigma_c + sigma_bar_t)


def merge_stats(a, b):
    """Elementwise sum of two compatible statistic objects.

    Merging the statistics of an utterance split into parts reproduces the
    whole-utterance statistics (frame additivity).
    """
    if type(a) is not type(b):
        raise ValueError(
            f"cannot merge statistics of different variants: "
            f"{type(a).__name__} vs {type(b).__name__}"
        )
    if isinstance(a, BwStats):
        if a.f_hat.shape != b.f_hat.shape:
            raise ValueError("statistic dimensions differ")
        return BwStats(a.n + b.n, a.f_hat + b.f_hat, utt_id=a.utt_id)
    if isinstance(a, NormalizedStats):
        if a.n_tilde.shape != b.n_tilde.shape:
            raise ValueError("statistic dimensions differ")
        return NormalizedStats(a.n_tilde + b.n_tilde, a.f_tilde + b.f_tilde, utt_id=a.utt_id)
    raise TypeError(f"unsupported statistics type {type(a).__name__}")


def fstat_cosine(a: BwStats, b: BwStats) -> float:
    """Cosine distance between the vectorized first-order statistics.

    1 - <vec(F_a), vec(F_b)> / (|F_a| |F_b|), in [0, 2].
    """
    if a.f_hat.shape != b.f_hat.shape:
        raise ValueError("statistic dimensions differ")
    va, vb = a.f_hat.ravel(), b.f_hat.ravel()
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance undefined for zero statistics")
    return float(1.0 - np.dot(va, vb) / (na * nb))


_STATS_HEADER = struct.Struct("<4sIBQQ")


def write_stats(path, stats) -> None:
    """Binary container: header, variant tag, then the two float64 arrays."""
    if isinstance(stats, BwStats):
        tag, first, second = _TAG_RAW, stats.n, stats.f_hat
        c, f = stats.f_hat.shape
    elif isinstance(stats, NormalizedStats):
        tag, first, second = _TAG_NORMALIZED, stats.n_tilde, stats.f_tilde
        c, f = stats.n_tilde.shape
    else:
        raise TypeError(f"unsupported statistics type {type(stats).__name__}")
    payload = _STATS_HEADER.pack(STATS_MAGIC, STATS_FORMAT_VERSION, tag, c, f)
    payload += np.ascontiguousarray(first, dtype="<f8").tobytes()
    payload += np.ascontiguousarray(second, dtype="<f8").tobytes()
    Path(path).write_bytes(payload)


def read_stats(path, utt_id: str | None = None):
    raw = Path(path).read_bytes()
    if len(raw) < _STATS_HEADER.size:
        raise ValueError(f"{path}: truncated statistics file")
    magic, version, tag, c, f = _STATS_HEADER.unpack_from(raw)
    if magic != STATS_MAGIC or version != STATS_FORMAT_VERSION:
        raise ValueError(f"{path}: bad magic or version")
    name = Path(path).stem if utt_id is None else utt_id
    off = _STATS_HEADER.size
    if tag == _TAG_RAW:
        need = off + 8 * (c + c * f)
        if len(raw) < need:
            raise ValueError(f"{path}: truncated statistics file")
        n = np.frombuffer(raw, dtype="<f8", count=c, offset=off).copy()
        f_hat = np.frombuffer(raw, dtype="<f8", count=c * f, offset=off + 8 * c)
        return BwStats(n, f_hat.reshape(c, f).copy(), utt_id=name)
    if tag == _TAG_NORMALIZED:
        need = off + 16 * c * f
        if len(raw) < need:
            raise ValueError(f"{path}: truncated statistics file")
        n_tilde = np.frombuffer(raw, dtype="<f8", count=c * f, offset=off)
        f_tilde = np.frombuffer(raw, dtype="<f8", count=c * f, offset=off + 8 * c * f)
        return NormalizedStats(
            n_tilde.reshape(c, f).copy(), f_tilde.reshape(c, f).copy(), utt_id=name
        )
    raise ValueError(f"{path}: unknown statistics variant tag {tag}")
