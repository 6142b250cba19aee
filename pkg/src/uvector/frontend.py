"""Acoustic front-end: MFCC extraction, deltas, VAD, CMVN and feature file I/O.

The feature pipeline is the usual cepstral recipe (MFCCs plus log-energy,
first/second order derivatives, energy-based voice activity detection,
per-utterance mean/variance normalization).  Alongside the features, the
module carries per-frame diagonal uncertainty sequences through the same
transforms so that downstream statistics can consume them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.fft

FORMAT_VERSION = 1
FEATURE_MAGIC = b"UVFM"
UNCERTAINTY_MAGIC = b"UVUN"

# 30 dB expressed in natural-log energy units
VAD_THRESHOLD_LOG = 30.0 * np.log(10.0) / 10.0
CMVN_VAR_FLOOR = 1e-10


class FeatureFileError(Exception):
    """Base class for feature/uncertainty container errors."""


class BadMagicError(FeatureFileError):
    """Magic bytes or format version do not match."""


class TruncatedFileError(FeatureFileError):
    """File ends before the declared payload."""


class InvalidDataError(FeatureFileError):
    """Payload violates invariants (NaN/Inf, empty matrix, bad mask)."""


@dataclass
class FeatureMeta:
    frame_rate_hz: float = 100.0
    feature_kind: str = "raw"
    energy_dim: int | None = None


@dataclass
class FeatureMatrix:
    """L x F sequence of feature frames for one utterance.

    :attr frames: (L, F) float64 matrix, one row per frame
    :attr vad_mask: (L,) boolean vector, True for voiced frames
    :attr utt_id: utterance identifier
    :attr meta: frame rate, feature kind tag and log-energy column index
    """

    frames: np.ndarray
    vad_mask: np.ndarray
    utt_id: str = ""
    meta: FeatureMeta = field(default_factory=FeatureMeta)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError("frames must be a non-empty L x F matrix")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain NaN/Inf")
        self.vad_mask = np.asarray(self.vad_mask, dtype=bool)
        if self.vad_mask.shape != (self.frames.shape[0],):
            raise ValueError("vad_mask length must equal frame count")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def voiced(self) -> np.ndarray:
        """Rows of `frames` selected by the VAD mask."""
        return self.frames[self.vad_mask]


@dataclass
class UncertaintySequence:
    """Per-frame diagonal uncertainty covariances aligned to a FeatureMatrix.

    :attr diag_vars: (L, F) nonnegative matrix, row t is the diagonal of the
        frame-t uncertainty covariance
    :attr utt_id: utterance identifier
    """

    diag_vars: np.ndarray
    utt_id: str = ""

    def __post_init__(self):
        self.diag_vars = np.asarray(self.diag_vars, dtype=np.float64)
        if self.diag_vars.ndim != 2 or self.diag_vars.shape[0] < 1:
            raise ValueError("diag_vars must be a non-empty L x F matrix")
        if not np.all(np.isfinite(self.diag_vars)):
            raise ValueError("diag_vars contain NaN/Inf")
        if np.any(self.diag_vars < 0):
            raise ValueError("uncertainty entries must be nonnegative")

    @property
    def num_frames(self) -> int:
        return self.diag_vars.shape[0]

    @property
    def dim(self) -> int:
        return self.diag_vars.shape[1]


@dataclass
class MfccConfig:
    num_ceps: int = 19
    append_log_energy: bool = True
    window_ms: float = 25.0
    hop_ms: float = 10.0
    num_mel_filters: int = 24
    delta_window: int = 2
    sample_rate_hz: float = 16000.0

    def __post_init__(self):
        if self.num_ceps >= self.num_mel_filters:
            raise ValueError("num_ceps must be < num_mel_filters")
        if self.hop_ms > self.window_ms:
            raise ValueError("hop must not exceed window")
        if self.window_ms <= 0 or self.hop_ms <= 0 or self.sample_rate_hz <= 0:
            raise ValueError("window, hop and sample rate must be positive")


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _mel_filterbank(num_filters: int, nfft: int, sample_rate: float) -> np.ndarray:
    """Triangular mel filterbank, (num_filters, nfft//2 + 1)."""
    low_mel, high_mel = _hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0)
    mel_points = np.linspace(low_mel, high_mel, num_filters + 2)
    hz_points = _mel_to_hz(mel_points)
    bins = np.fft.rfftfreq(nfft, d=1.0 / sample_rate)
    fbank = np.zeros((num_filters, bins.size))
    for i in range(num_filters):
        left, center, right = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        up = (bins - left) / max(center - left, 1e-12)
        down = (right - bins) / max(right - center, 1e-12)
        fbank[i] = np.clip(np.minimum(up, down), 0.0, None)
    return fbank


def extract_mfcc(waveform, cfg: MfccConfig, utt_id: str = "") -> FeatureMatrix:
    """Extract MFCC features (optionally with appended log-energy).

    The c0 coefficient is dropped; frame energy is carried by the separate
    log-energy column so that amplitude changes only touch that dimension.

    :param waveform: 1-D sample sequence
    :param cfg: analysis configuration
    :return: FeatureMatrix with F = num_ceps (+1 with log-energy), all frames
        initially marked voiced
    """
    x = np.asarray(waveform, dtype=np.float64).ravel()
    win = int(round(cfg.window_ms * 1e-3 * cfg.sample_rate_hz))
    hop = int(round(cfg.hop_ms * 1e-3 * cfg.sample_rate_hz))
    if x.size < win:
        raise ValueError(f"waveform has {x.size} samples, shorter than one {win}-sample window")

    num_frames = (x.size - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(num_frames)[:, None]
    frames = x[idx]

    # raw frame energy before windowing, floored to keep the log finite
    log_energy = np.log(np.maximum(np.sum(frames**2, axis=1), 1e-30))

    nfft = 1
    while nfft < win:
        nfft *= 2
    window = np.hamming(win)
    spec = np.abs(np.fft.rfft(frames * window, n=nfft)) ** 2
    fbank = _mel_filterbank(cfg.num_mel_filters, nfft, cfg.sample_rate_hz)
    logmel = np.log(np.maximum(spec @ fbank.T, 1e-30))
    ceps = scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)[:, 1 : cfg.num_ceps + 1]

    if cfg.append_log_energy:
        feats = np.hstack([ceps, log_energy[:, None]])
        energy_dim = cfg.num_ceps
        kind = f"mfcc{cfg.num_ceps}+loge"
    else:
        feats = ceps
        energy_dim = None
        kind = f"mfcc{cfg.num_ceps}"

    meta = FeatureMeta(
        frame_rate_hz=1000.0 / cfg.hop_ms,
        feature_kind=kind,
        energy_dim=energy_dim,
    )
    return FeatureMatrix(feats, np.ones(num_frames, dtype=bool), utt_id=utt_id, meta=meta)


def _delta_filter(x: np.ndarray, half_window: int) -> np.ndarray:
    """Regression delta with edge replication along axis 0."""
    length = x.shape[0]
    denom = 2.0 * sum(j * j for j in range(1, half_window + 1))
    out = np.zeros_like(x)
    for j in range(1, half_window + 1):
        fwd = x[np.minimum(np.arange(length) + j, length - 1)]
        bwd = x[np.maximum(np.arange(length) - j, 0)]
        out += j * (fwd - bwd)
    return out / denom


def append_deltas(fm: FeatureMatrix, delta_window: int = 2) -> FeatureMatrix:
    """Append first- and second-order regression deltas (F_out = 3 * F_in)."""
    if delta_window < 1:
        raise ValueError("delta_window must be >= 1")
    if fm.num_frames <= 2 * delta_window:
        raise ValueError(
            f"utterance too short for deltas: {fm.num_frames} frames, window {delta_window}"
        )
    d1 = _delta_filter(fm.frames, delta_window)
    d2 = _delta_filter(d1, delta_window)
    meta = replace(fm.meta, feature_kind=fm.meta.feature_kind + "+d+dd")
    return FeatureMatrix(
        np.hstack([fm.frames, d1, d2]), fm.vad_mask.copy(), utt_id=fm.utt_id, meta=meta
    )


def _delta_filter_var(v: np.ndarray, half_window: int) -> np.ndarray:
    """Variance of the regression delta under frame independence.

    Propagates the delta filter with squared coefficients; edge replication
    matches `_delta_filter`, so replicated frames contribute their variance
    once per tap like the features do.
    """
    length = v.shape[0]
    denom = 2.0 * sum(j * j for j in range(1, half_window + 1))
    out = np.zeros_like(v)
    for j in range(1, half_window + 1):
        fwd = v[np.minimum(np.arange(length) + j, length - 1)]
        bwd = v[np.maximum(np.arange(length) - j, 0)]
        out += j * j * (fwd + bwd)
    return out / denom**2


def append_deltas_uncertainty(unc: UncertaintySequence, delta_window: int = 2) -> UncertaintySequence:
    """Companion of `append_deltas` for diagonal uncertainties."""
    if unc.num_frames <= 2 * delta_window:
        raise ValueError("utterance too short for deltas")
    v1 = _delta_filter_var(unc.diag_vars, delta_window)
    v2 = _delta_filter_var(v1, delta_window)
    return UncertaintySequence(np.hstack([unc.diag_vars, v1, v2]), utt_id=unc.utt_id)


def energy_vad(fm: FeatureMatrix, threshold_log: float = VAD_THRESHOLD_LOG) -> FeatureMatrix:
    """Fill the VAD mask: voiced iff log-energy > per-utterance max - threshold.

    The argmax frame always satisfies the strict inequality, so at least one
    frame is voiced.
    """
    if fm.meta.energy_dim is None:
        raise ValueError("energy_vad requires a log-energy dimension")
    log_e = fm.frames[:, fm.meta.energy_dim]
    mask = log_e > log_e.max() - threshold_log
    return FeatureMatrix(fm.frames.copy(), mask, utt_id=fm.utt_id, meta=replace(fm.meta))


def cmvn(fm: FeatureMatrix) -> tuple[FeatureMatrix, np.ndarray]:
    """Cepstral mean and variance normalization.

    Statistics are computed over voiced frames only and applied to every
    frame.  Returns the normalized features and the per-dimension stddev that
    was divided out, so companion uncertainties can be rescaled with
    `scale_uncertainty`.
    """
    voiced = fm.voiced()
    if voiced.shape[0] < 2:
        raise ValueError("cmvn needs at least 2 voiced frames")
    mean = voiced.mean(axis=0)
    var = np.maximum(voiced.var(axis=0), CMVN_VAR_FLOOR)
    scales = np.sqrt(var)
    out = (fm.frames - mean) / scales
    return FeatureMatrix(out, fm.vad_mask.copy(), utt_id=fm.utt_id, meta=replace(fm.meta)), scales


def scale_uncertainty(unc: UncertaintySequence, scales: np.ndarray) -> UncertaintySequence:
    """Rescale uncertainties after a per-dimension feature scaling.

    A feature divided by `scales[f]` has its variance divided by
    `scales[f] ** 2`.
    """
    scales = np.asarray(scales, dtype=np.float64)
    if scales.shape != (unc.dim,):
        raise ValueError("scales length must equal feature dimension")
    if np.any(scales <= 0):
        raise ValueError("scales must be strictly positive")
    return UncertaintySequence(unc.diag_vars / scales**2, utt_id=unc.utt_id)


_HEADER = struct.Struct("<4sIQQI")
_FLAG_HAS_MASK = 1


def _write_container(path, magic: bytes, matrix: np.ndarray, mask: np.ndarray | None):
    flags = _FLAG_HAS_MASK if mask is not None else 0
    length, dim = matrix.shape
    payload = _HEADER.pack(magic, FORMAT_VERSION, length, dim, flags)
    payload += np.ascontiguousarray(matrix, dtype="<f8").tobytes()
    if mask is not None:
        payload += np.asarray(mask, dtype=np.uint8).tobytes()
    Path(path).write_bytes(payload)


def _read_container(path, magic: bytes) -> tuple[np.ndarray, np.ndarray | None]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: shorter than header")
    got_magic, version, length, dim, flags = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {got_magic!r}")
    if version != FORMAT_VERSION:
        raise BadMagicError(f"{path}: unsupported version {version}")
    if length < 1 or dim < 1:
        raise InvalidDataError(f"{path}: empty matrix ({length} x {dim})")
    need = _HEADER.size + 8 * length * dim + (length if flags & _FLAG_HAS_MASK else 0)
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: need {need} bytes, found {len(raw)}")
    matrix = np.frombuffer(raw, dtype="<f8", count=length * dim, offset=_HEADER.size)
    matrix = matrix.reshape(length, dim).copy()
    if not np.all(np.isfinite(matrix)):
        raise InvalidDataError(f"{path}: non-finite entries")
    mask = None
    if flags & _FLAG_HAS_MASK:
        mask_off = _HEADER.size + 8 * length * dim
        mask = np.frombuffer(raw, dtype=np.uint8, count=length, offset=mask_off).astype(bool)
    return matrix, mask


def write_features(path, fm: FeatureMatrix) -> None:
    _write_container(path, FEATURE_MAGIC, fm.frames, fm.vad_mask)


def read_features(path, utt_id: str | None = None) -> FeatureMatrix:
    matrix, mask = _read_container(path, FEATURE_MAGIC)
    if mask is None:
        mask = np.ones(matrix.shape[0], dtype=bool)
    name = Path(path).stem if utt_id is None else utt_id
    return FeatureMatrix(matrix, mask, utt_id=name)


def write_uncertainty(path, unc: UncertaintySequence) -> None:
    _write_container(path, UNCERTAINTY_MAGIC, unc.diag_vars, None)


def read_uncertainty(path, utt_id: str | None = None) -> UncertaintySequence:
    matrix, _ = _read_container(path, UNCERTAINTY_MAGIC)
    if np.any(matrix < 0):
        raise InvalidDataError(f"{path}: negative uncertainty entries")
    name = Path(path).stem if utt_id is None else utt_id
    return UncertaintySequence(matrix, utt_id=name)
