from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uvector.frontend import (
    VAD_THRESHOLD_LOG,
    BadMagicError,
    FeatureMatrix,
    FeatureMeta,
    InvalidDataError,
    MfccConfig,
    TruncatedFileError,
    UncertaintySequence,
    append_deltas,
    append_deltas_uncertainty,
    cmvn,
    energy_vad,
    extract_mfcc,
    read_features,
    read_uncertainty,
    scale_uncertainty,
    write_features,
    write_uncertainty,
)


def _fm(frames, mask=None, energy_dim=None):
    frames = np.asarray(frames, dtype=np.float64)
    if mask is None:
        mask = np.ones(frames.shape[0], dtype=bool)
    return FeatureMatrix(frames, mask, utt_id="u", meta=FeatureMeta(energy_dim=energy_dim))


# ---------------------------------------------------------------- extract_mfcc

def test_mfcc_frame_count_one_second_16k():
    cfg = MfccConfig()
    fm = extract_mfcc(np.random.default_rng(0).normal(size=16000), cfg)
    # floor((16000 - 400) / 160) + 1
    assert fm.num_frames == 98
    assert fm.dim == 20  # 19 cepstra + log-energy
    assert fm.meta.energy_dim == 19


def test_mfcc_requires_one_window():
    with pytest.raises(ValueError):
        extract_mfcc(np.zeros(100), MfccConfig())


def test_mfcc_dc_input_constant_cepstra():
    fm = extract_mfcc(np.full(8000, 0.25), MfccConfig())
    assert np.all(fm.frames == fm.frames[0])


def test_mfcc_amplitude_doubling_only_moves_log_energy():
    rng = np.random.default_rng(3)
    wave = rng.normal(size=8000)
    cfg = MfccConfig()
    base = extract_mfcc(wave, cfg)
    loud = extract_mfcc(2.0 * wave, cfg)
    np.testing.assert_allclose(loud.frames[:, :19], base.frames[:, :19], atol=1e-9)
    np.testing.assert_allclose(
        loud.frames[:, 19] - base.frames[:, 19], np.log(4.0), atol=1e-9
    )


def test_mfcc_config_validation():
    with pytest.raises(ValueError):
        MfccConfig(num_ceps=24, num_mel_filters=24)
    with pytest.raises(ValueError):
        MfccConfig(window_ms=10.0, hop_ms=25.0)


# --------------------------------------------------------------- append_deltas

def _delta_oracle(x, half_window):
    """Direct per-definition regression delta with edge replication."""
    length = x.shape[0]
    denom = 2.0 * sum(j * j for j in range(1, half_window + 1))
    out = np.zeros_like(x)
    for t in range(length):
        for j in range(1, half_window + 1):
            out[t] += j * (x[min(t + j, length - 1)] - x[max(t - j, 0)])
    return out / denom


def test_deltas_match_direct_formula():
    rng = np.random.default_rng(5)
    frames = rng.normal(size=(30, 4))
    out = append_deltas(_fm(frames), delta_window=2)
    d1 = _delta_oracle(frames, 2)
    np.testing.assert_allclose(out.frames[:, 4:8], d1, atol=1e-12)
    np.testing.assert_allclose(out.frames[:, 8:12], _delta_oracle(d1, 2), atol=1e-12)


def test_deltas_constant_features_are_zero():
    out = append_deltas(_fm(np.full((20, 3), 2.5)), delta_window=2)
    assert np.all(out.frames[:, 3:] == 0.0)


def test_deltas_linear_ramp_interior_slope():
    slope = 0.7
    frames = (slope * np.arange(40))[:, None] * np.ones((1, 2))
    out = append_deltas(_fm(frames), delta_window=2)
    # frames t in [J, L-1-J] see the exact slope; second deltas vanish a
    # window further in
    np.testing.assert_allclose(out.frames[2:-2, 2:4], slope, atol=1e-12)
    np.testing.assert_allclose(out.frames[4:-4, 4:6], 0.0, atol=1e-12)


def test_deltas_output_width_and_short_input():
    out = append_deltas(_fm(np.random.default_rng(0).normal(size=(25, 20))))
    assert out.dim == 60
    with pytest.raises(ValueError):
        append_deltas(_fm(np.zeros((4, 3))), delta_window=2)


def test_delta_uncertainty_squared_coefficients():
    rng = np.random.default_rng(8)
    diag = rng.uniform(0.1, 2.0, size=(25, 3))
    out = append_deltas_uncertainty(UncertaintySequence(diag, utt_id="u"), delta_window=2)
    length = diag.shape[0]
    denom = 2.0 * (1 + 4)
    expect = np.zeros_like(diag)
    for t in range(length):
        for j in (1, 2):
            expect[t] += j * j * (diag[min(t + j, length - 1)] + diag[max(t - j, 0)])
    np.testing.assert_allclose(out.diag_vars[:, 3:6], expect / denom**2, atol=1e-12)
    assert out.dim == 9


# ------------------------------------------------------------------ energy_vad

def test_vad_all_equal_energy_all_voiced():
    frames = np.hstack([np.zeros((10, 2)), np.full((10, 1), -3.0)])
    out = energy_vad(_fm(frames, energy_dim=2))
    assert out.vad_mask.all()


def test_vad_one_loud_frame():
    log_e = np.full(50, -60.0 / 10.0 * np.log(10.0))  # 60 dB below the peak
    log_e[17] = 0.0
    frames = np.hstack([np.zeros((50, 1)), log_e[:, None]])
    out = energy_vad(_fm(frames, energy_dim=1))
    assert out.vad_mask[17]
    assert out.vad_mask.sum() == 1


def test_vad_idempotent_and_requires_energy():
    rng = np.random.default_rng(1)
    frames = np.hstack([rng.normal(size=(30, 2)), rng.normal(size=(30, 1))])
    once = energy_vad(_fm(frames, energy_dim=2))
    twice = energy_vad(once)
    np.testing.assert_array_equal(once.vad_mask, twice.vad_mask)
    with pytest.raises(ValueError):
        energy_vad(_fm(frames))


def test_vad_threshold_is_30db_in_log_units():
    assert VAD_THRESHOLD_LOG == pytest.approx(3.0 * np.log(10.0))


# ------------------------------------------------------------------------ cmvn

def test_cmvn_zero_mean_unit_variance_on_voiced():
    rng = np.random.default_rng(2)
    frames = rng.normal(loc=3.0, scale=2.5, size=(200, 5))
    mask = rng.uniform(size=200) > 0.3
    out, scales = cmvn(_fm(frames, mask=mask))
    voiced = out.frames[mask]
    np.testing.assert_allclose(voiced.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(voiced.var(axis=0), 1.0, atol=1e-9)
    assert scales.shape == (5,)


def test_cmvn_fixed_point_on_normalized_input():
    rng = np.random.default_rng(4)
    frames = rng.normal(size=(500, 3))
    frames -= frames.mean(axis=0)
    frames /= frames.std(axis=0)
    out, scales = cmvn(_fm(frames))
    np.testing.assert_allclose(out.frames, frames, atol=1e-9)
    np.testing.assert_allclose(scales, 1.0, atol=1e-9)


def test_cmvn_constant_dimension_floored():
    rng = np.random.default_rng(6)
    frames = np.hstack([rng.normal(size=(50, 2)), np.full((50, 1), 7.0)])
    out, scales = cmvn(_fm(frames))
    assert np.all(np.isfinite(out.frames))
    np.testing.assert_allclose(out.frames[:, 2], 0.0, atol=1e-12)


def test_cmvn_needs_two_voiced_frames():
    mask = np.zeros(5, dtype=bool)
    mask[0] = True
    with pytest.raises(ValueError):
        cmvn(_fm(np.random.default_rng(0).normal(size=(5, 2)), mask=mask))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cmvn_idempotent(seed):
    rng = np.random.default_rng(seed)
    frames = rng.normal(scale=rng.uniform(0.5, 5.0), size=(60, 4)) + rng.normal(size=4)
    once, _ = cmvn(_fm(frames))
    twice, _ = cmvn(once)
    np.testing.assert_allclose(twice.frames[once.vad_mask], once.frames[once.vad_mask], atol=1e-9)


# ----------------------------------------------------------- scale_uncertainty

def test_scale_uncertainty_arithmetic():
    unc = UncertaintySequence(np.array([[4.0, 8.0], [0.0, 2.0]]), utt_id="u")
    out = scale_uncertainty(unc, np.array([2.0, 1.0]))
    np.testing.assert_array_equal(out.diag_vars, [[1.0, 8.0], [0.0, 2.0]])


def test_scale_uncertainty_identity_and_errors():
    unc = UncertaintySequence(np.abs(np.random.default_rng(0).normal(size=(10, 3))))
    np.testing.assert_array_equal(
        scale_uncertainty(unc, np.ones(3)).diag_vars, unc.diag_vars
    )
    with pytest.raises(ValueError):
        scale_uncertainty(unc, np.array([1.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        scale_uncertainty(unc, np.array([1.0, -2.0, 1.0]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_scale_uncertainty_composes_to_identity(seed):
    rng = np.random.default_rng(seed)
    unc = UncertaintySequence(np.abs(rng.normal(size=(20, 4))))
    scales = rng.uniform(0.2, 5.0, size=4)
    back = scale_uncertainty(scale_uncertainty(unc, scales), 1.0 / scales)
    np.testing.assert_allclose(back.diag_vars, unc.diag_vars, rtol=1e-12, atol=1e-300)


# -------------------------------------------------------------------- file I/O

def test_feature_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(9)
    fm = _fm(rng.normal(size=(37, 11)), mask=rng.uniform(size=37) > 0.5)
    path = tmp_path / "x.uvfm"
    write_features(path, fm)
    back = read_features(path)
    np.testing.assert_array_equal(back.frames, fm.frames)
    np.testing.assert_array_equal(back.vad_mask, fm.vad_mask)
    assert back.utt_id == "x"


def test_uncertainty_round_trip(tmp_path):
    unc = UncertaintySequence(np.abs(np.random.default_rng(1).normal(size=(12, 6))))
    path = tmp_path / "x.uvun"
    write_uncertainty(path, unc)
    np.testing.assert_array_equal(read_uncertainty(path).diag_vars, unc.diag_vars)


def test_corrupted_magic_is_format_error(tmp_path):
    path = tmp_path / "x.uvfm"
    write_features(path, _fm(np.zeros((3, 2))))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        read_features(path)


def test_truncated_file_detected(tmp_path):
    path = tmp_path / "x.uvfm"
    write_features(path, _fm(np.random.default_rng(0).normal(size=(10, 4))))
    path.write_bytes(path.read_bytes()[:-17])
    with pytest.raises(TruncatedFileError):
        read_features(path)


def test_zero_length_file_rejected(tmp_path):
    path = tmp_path / "x.uvfm"
    path.write_bytes(struct.pack("<4sIQQI", b"UVFM", 1, 0, 4, 0))
    with pytest.raises(InvalidDataError):
        read_features(path)


def test_nan_payload_rejected(tmp_path):
    path = tmp_path / "x.uvfm"
    header = struct.pack("<4sIQQI", b"UVFM", 1, 1, 2, 0)
    path.write_bytes(header + np.array([np.nan, 1.0]).tobytes())
    with pytest.raises(InvalidDataError):
        read_features(path)


def test_wrong_container_kind_rejected(tmp_path):
    path = tmp_path / "x.uvun"
    write_uncertainty(path, UncertaintySequence(np.ones((3, 2))))
    with pytest.raises(BadMagicError):
        read_features(path)


# ------------------------------------------------------------------- pipeline

def test_full_pipeline_finite_for_rough_waveforms():
    rng = np.random.default_rng(11)
    for wave in (
        np.zeros(6000),
        rng.normal(size=6000) * 1e6,
        np.sin(np.linspace(0, 100, 6000)) * 1e-8,
    ):
        fm = extract_mfcc(wave, MfccConfig())
        fm = append_deltas(fm, 2)
        fm = energy_vad(fm)
        if fm.vad_mask.sum() >= 2:
            fm, _ = cmvn(fm)
        assert np.all(np.isfinite(fm.frames))
