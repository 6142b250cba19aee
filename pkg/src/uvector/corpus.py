"""Synthetic corpus generation with oracle uncertainty.

Generates speakers, utterances, feature-space corruption and a matching
"enhanced" view so that every propagation variant can be exercised and
measured without any proprietary audio corpus.  Utterance features are
sampled from the same generative model the extractor assumes: a diagonal
GMM whose component means are shifted by a low-rank transform of the
per-utterance total factors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.signal

from .extractor import TvModel, load_tv, save_tv
from .frontend import (
    FeatureMatrix,
    FeatureMeta,
    UncertaintySequence,
    read_features,
    write_features,
)
from .ubm import VAR_FLOOR, GmmModel, load_gmm, save_gmm

_MASK64 = (1 << 64) - 1
_SPEAKER_STREAM_BASE = 1 << 48
MAX_SNR_DB = 300.0


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def derive_seed(seed: int, index: int) -> int:
    """Seed for an independent substream: base seed XOR a hash of the index."""
    return (seed & _MASK64) ^ _splitmix64(index)


def _substream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, index))


@dataclass
class GenerativeSpec:
    """Shape and scale of a synthetic corpus."""

    num_speakers: int
    utts_per_speaker: int
    frames_per_utt: int
    feature_dim: int
    num_components: int
    ivector_dim: int
    speaker_shift_scale: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        counts = (
            self.num_speakers,
            self.utts_per_speaker,
            self.frames_per_utt,
            self.feature_dim,
            self.num_components,
            self.ivector_dim,
        )
        if any(c < 1 for c in counts):
            raise ValueError("all counts must be >= 1")
        if self.ivector_dim > self.num_components * self.feature_dim:
            raise ValueError("ivector_dim cannot exceed C*F")
        if self.speaker_shift_scale < 0:
            raise ValueError("speaker_shift_scale must be nonnegative")


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    features: FeatureMatrix
    true_w: np.ndarray


@dataclass
class CorpusBundle:
    utterances: list[Utterance]
    gmm: GmmModel
    tv: TvModel
    spec: GenerativeSpec | None = field(default=None, compare=False)


@dataclass
class CorruptionSpec:
    """Feature-space additive-noise corruption at a target SNR."""

    target_snr_db: float
    noise_kind: str = "white"  # "white" or "colored"
    ar_coefficient: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.target_snr_db):
            raise ValueError("target SNR must be finite")
        if self.noise_kind not in ("white", "colored"):
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        if self.noise_kind == "colored" and not (-1.0 < self.ar_coefficient < 1.0):
            raise ValueError("AR coefficient must lie in (-1, 1)")


_DIM_PROFILE_SPAN = 4.0


def _dim_profile(num_dims: int) -> np.ndarray:
    """Per-dimension scale profile with geometric mean one.

    Mimics cepstral-style features whose variance decays across dimensions;
    a flat-spectrum corruption then loads the low-variance dimensions much
    harder than the high-variance ones, as acoustic noise does.
    """
    profile = np.geomspace(_DIM_PROFILE_SPAN, 1.0 / _DIM_PROFILE_SPAN, num_dims)
    return profile / np.exp(np.mean(np.log(profile)))


def synth_ubm(spec: GenerativeSpec) -> GmmModel:
    """Random well-separated diagonal GMM.

    Component means are rescaled so every pair is at least two average
    standard deviations apart; variances are unit-order (modulated by the
    per-dimension profile) and floored.
    """
    c, f = spec.num_components, spec.feature_dim
    if c * f > 2**31 - 1:
        raise ValueError("C*F exceeds the supported index space")
    rng = _substream(spec.rng_seed, 0)
    weights = rng.uniform(0.5, 1.5, size=c)
    weights /= weights.sum()
    profile = _dim_profile(f)
    variances = np.maximum(rng.uniform(0.5, 2.0, size=(c, f)) * profile**2, VAR_FLOOR)
    means = rng.normal(0.0, 1.0, size=(c, f)) * profile

    if c > 1:
        avg_std = float(np.mean(np.sqrt(variances)))
        min_dist = min(
            float(np.linalg.norm(means[i] - means[j]))
            for i in range(c)
            for j in range(i + 1, c)
        )
        while min_dist <= 0.0:  # astronomically unlikely duplicate draw
            means += rng.normal(0.0, 1e-3, size=means.shape)
            min_dist = min(
                float(np.linalg.norm(means[i] - means[j]))
                for i in range(c)
                for j in range(i + 1, c)
            )
        target = 2.0 * avg_std
        if min_dist < target:
            means *= target * (1.0 + 1e-9) / min_dist
    return GmmModel(weights, means, variances)


def synth_tv(spec: GenerativeSpec, gmm: GmmModel, scale: float = 0.1) -> TvModel:
    """Random loading matrix paired with the UBM covariance as residual.

    Rows are scaled like the model's per-dimension standard deviation, so
    speaker variability tracks overall variability dimension by dimension.
    """
    rng = _substream(spec.rng_seed, 1)
    dim_std = np.sqrt(gmm.diag_covs.mean(axis=0))
    t = rng.normal(0.0, scale, size=(gmm.num_components, gmm.dim, spec.ivector_dim))
    t *= dim_std[None, :, None]
    return TvModel(t, gmm.diag_covs.copy())


def synth_corpus(spec: GenerativeSpec, gmm: GmmModel, tv: TvModel) -> CorpusBundle:
    """Sample a corpus from the generative model.

    Per speaker a fixed offset in total-factor space is drawn (scaled by
    `speaker_shift_scale`); each utterance draws total factors around that
    offset, then frames are sampled componentwise from the shifted GMM.
    Every utterance has its own seeded substream, so generation is
    order-independent and reproducible.
    """
    if (gmm.num_components, gmm.dim) != (tv.num_components, tv.feature_dim):
        raise ValueError("GMM and TV model dimensions do not match")
    if (gmm.num_components, gmm.dim, tv.ivector_dim) != (
        spec.num_components,
        spec.feature_dim,
        spec.ivector_dim,
    ):
        raise ValueError("models do not match the generative spec")

    length, dim = spec.frames_per_utt, spec.feature_dim
    std = np.sqrt(gmm.diag_covs)
    utterances = []
    utt_index = 0
    for spk in range(spec.num_speakers):
        spk_rng = _substream(spec.rng_seed, _SPEAKER_STREAM_BASE + spk)
        offset = spec.speaker_shift_scale * spk_rng.standard_normal(spec.ivector_dim)
        speaker_id = f"spk{spk:04d}"
        for j in range(spec.utts_per_speaker):
            rng = _substream(spec.rng_seed, utt_index)
            w = rng.standard_normal(spec.ivector_dim) + offset
            comps = rng.choice(gmm.num_components, size=length, p=gmm.weights)
            shift = np.einsum("cfd,d->cf", tv.t_matrix, w)
            frames = (
                gmm.means[comps]
                + shift[comps]
                + rng.standard_normal((length, dim)) * std[comps]
            )
            fm = FeatureMatrix(
                frames,
                np.ones(length, dtype=bool),
                utt_id=f"{speaker_id}_utt{j:03d}",
                meta=FeatureMeta(feature_kind="synthetic"),
            )
            utterances.append(Utterance(fm.utt_id, speaker_id, fm, w))
            utt_index += 1

    speaker_ids = {u.speaker_id for u in utterances}
    assert len(speaker_ids) == spec.num_speakers
    assert all(u.features.num_frames == length for u in utterances)
    return CorpusBundle(utterances, gmm, tv, spec=spec)


# Deterministic offset mixed into the stochastic noise.  Additive acoustic
# noise shifts log-spectral features toward a shared noise floor, so the
# feature-space stand-in carries a fixed mean component alongside the
# zero-mean fluctuation.
NOISE_FLOOR_FRACTION = 1.0


def corrupt(clean: FeatureMatrix, spec: CorruptionSpec) -> FeatureMatrix:
    """Add seeded noise at an exact per-utterance SNR (measured on voiced frames).

    The noise is a fixed positive floor plus a stochastic part: white noise
    is i.i.d. across frames and dimensions, colored noise runs a first-order
    autoregression along time in every dimension.  Targets above 300 dB are
    capped, leaving the features numerically unchanged.
    """
    snr_db = min(spec.target_snr_db, MAX_SNR_DB)
    rng = np.random.default_rng(spec.rng_seed & _MASK64)
    noise = rng.standard_normal(clean.frames.shape)
    if spec.noise_kind == "colored":
        noise = scipy.signal.lfilter([1.0], [1.0, -spec.ar_coefficient], noise, axis=0)
        noise *= np.sqrt(1.0 - spec.ar_coefficient**2)  # unit marginal variance
    noise += NOISE_FLOOR_FRACTION

    voiced = clean.vad_mask
    clean_energy = float(np.sum(clean.frames[voiced] ** 2))
    noise_energy = float(np.sum(noise[voiced] ** 2))
    if noise_energy <= 0.0:
        raise ValueError("degenerate noise draw")
    gain = np.sqrt(clean_energy / (noise_energy * 10.0 ** (snr_db / 10.0)))
    return FeatureMatrix(
        clean.frames + gain * noise,
        clean.vad_mask.copy(),
        utt_id=clean.utt_id,
        meta=clean.meta,
    )


def wiener_enhance(clean: FeatureMatrix, noisy: FeatureMatrix, gmm: GmmModel) -> FeatureMatrix:
    """Synthetic enhancement: remove the Wiener fraction of the added noise.

    Per dimension, the fraction of the true corruption that a linear MMSE
    enhancer would cancel is removed, leaving an independent residual error
    scaled by the classic gain v / (v + noise_var) with v the model's
    per-dimension variance.  The pair (enhanced, oracle uncertainty) then
    behaves like a real enhancer followed by oracle error measurement: the
    residual is zero-mean, frame-varying and unevenly spread over
    dimensions.  Only meant to exercise the propagation variants, not to be
    a deployable enhancer.
    """
    if clean.frames.shape != noisy.frames.shape:
        raise ValueError("clean/noisy shapes differ")
    global_mean = gmm.weights @ gmm.means
    global_var = gmm.weights @ (gmm.diag_covs + gmm.means**2) - global_mean**2
    added = noisy.frames - clean.frames
    noise_var = added[noisy.vad_mask].var(axis=0)
    residual_gain = global_var / (global_var + noise_var)
    enhanced = clean.frames + residual_gain * added
    return FeatureMatrix(
        enhanced, noisy.vad_mask.copy(), utt_id=noisy.utt_id, meta=noisy.meta
    )


def oracle_uncertainty(clean: FeatureMatrix, enhanced: FeatureMatrix) -> UncertaintySequence:
    """Oracle diagonal uncertainty: squared difference of the two views."""
    if clean.frames.shape != enhanced.frames.shape:
        raise ValueError("clean/enhanced shapes differ")
    return UncertaintySequence((clean.frames - enhanced.frames) ** 2, utt_id=enhanced.utt_id)


def write_corpus(bundle: CorpusBundle, out_dir) -> None:
    """Write features, manifest, generating models and true factors."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rows = []
    for utt in bundle.utterances:
        rel = f"features/{utt.utt_id}.uvfm"
        write_features(out / rel, utt.features)
        rows.append((utt.utt_id, utt.speaker_id, rel))
    with open(out / "manifest.tsv", "w", newline="") as handle:
        writer = csv.writer(handle, delimiter="\t")
        writer.writerows(rows)
    save_gmm(out / "gmm.json", bundle.gmm)
    save_tv(out / "tv.uvtv", bundle.tv)
    dim = bundle.tv.ivector_dim
    with open(out / "true_w.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["utt_id"] + [f"w_{i}" for i in range(dim)])
        for utt in bundle.utterances:
            writer.writerow([utt.utt_id] + [repr(float(x)) for x in utt.true_w])


def read_corpus(corpus_dir) -> CorpusBundle:
    root = Path(corpus_dir)
    gmm = load_gmm(root / "gmm.json")
    tv = load_tv(root / "tv.uvtv")
    true_w = {}
    with open(root / "true_w.csv", newline="") as handle:
        rows = list(csv.reader(handle))
    for row in rows[1:]:
        true_w[row[0]] = np.array([float(x) for x in row[1:]])
    utterances = []
    with open(root / "manifest.tsv", newline="") as handle:
        for utt_id, speaker_id, rel in csv.reader(handle, delimiter="\t"):
            fm = read_features(root / rel, utt_id=utt_id)
            utterances.append(Utterance(utt_id, speaker_id, fm, true_w[utt_id]))
    return CorpusBundle(utterances, gmm, tv)
