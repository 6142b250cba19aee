from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import ortho_group

from uvector.backend import (
    LdaTransform,
    PldaModel,
    apply_lda,
    apply_whitener,
    cosine_score,
    fit_lda,
    fit_whitener,
    length_normalize,
    load_backend,
    save_backend,
    score_plda,
    score_plda_trials,
    train_plda,
)


def _two_cov_data(seed, num_speakers=200, utts=10, between=(2.0, 1.0), within=(0.5, 1.5)):
    rng = np.random.default_rng(seed)
    r = len(between)
    speakers = rng.normal(size=(num_speakers, r)) * np.sqrt(between)
    rows, labels = [], []
    for k in range(num_speakers):
        rows.append(speakers[k] + rng.normal(size=(utts, r)) * np.sqrt(within))
        labels.extend([k] * utts)
    return np.vstack(rows), np.array(labels)


# -------------------------------------------------------------------- whitener

def test_whitener_produces_identity_covariance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 6)) @ rng.normal(size=(6, 6)) + rng.normal(size=6)
    wt = fit_whitener(x)
    out = apply_whitener(wt, x)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.T @ out / out.shape[0], np.eye(6), atol=1e-6)


def test_whitener_white_input_is_near_identity():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20000, 3))
    wt = fit_whitener(x)
    np.testing.assert_allclose(wt.transform, np.eye(3), atol=0.05)
    np.testing.assert_allclose(wt.mean, 0.0, atol=0.05)


def test_whitener_diagonal_covariance_case():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(40000, 2)) * np.array([2.0, 1.0])
    wt = fit_whitener(x)
    np.testing.assert_allclose(np.abs(wt.transform), np.diag([0.5, 1.0]), atol=0.03)


def test_whitener_fixed_point_when_applied_twice():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(300, 4)) @ rng.normal(size=(4, 4))
    once = apply_whitener(fit_whitener(x), x)
    second = fit_whitener(once)
    np.testing.assert_allclose(second.transform, np.eye(4), atol=1e-6)
    np.testing.assert_allclose(second.mean, 0.0, atol=1e-9)


def test_whitener_needs_two_vectors_and_handles_rank_deficiency():
    with pytest.raises(ValueError):
        fit_whitener(np.zeros((1, 3)))
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 5))  # fewer rows than dims: ridge path
    wt = fit_whitener(x)
    assert np.all(np.isfinite(wt.transform))


# ------------------------------------------------------------ length_normalize

def test_length_normalize_cases():
    np.testing.assert_allclose(length_normalize(np.array([3.0, 4.0])), [0.6, 0.8])
    unit = np.array([1.0, 0.0, 0.0])
    np.testing.assert_array_equal(length_normalize(unit), unit)
    v = np.array([0.3, -2.0, 1.0])
    np.testing.assert_allclose(
        length_normalize(length_normalize(v)), length_normalize(v), atol=1e-15
    )
    with pytest.raises(ValueError):
        length_normalize(np.zeros(3))


# ------------------------------------------------------------------------- LDA

def test_lda_two_classes_matches_fisher_direction():
    rng = np.random.default_rng(5)
    a = rng.normal(loc=(0, 0), scale=(1.0, 2.0), size=(4000, 2))
    b = rng.normal(loc=(3, 1), scale=(1.0, 2.0), size=(4000, 2))
    x = np.vstack([a, b])
    labels = np.array([0] * 4000 + [1] * 4000)
    lda = fit_lda(x, labels, 1)
    sw = (a - a.mean(0)).T @ (a - a.mean(0)) + (b - b.mean(0)).T @ (b - b.mean(0))
    fisher = np.linalg.solve(sw, b.mean(0) - a.mean(0))
    fisher /= np.linalg.norm(fisher)
    got = lda.projection[:, 0] / np.linalg.norm(lda.projection[:, 0])
    assert min(np.linalg.norm(got - fisher), np.linalg.norm(got + fisher)) < 1e-6


def test_lda_identical_means_still_orthonormal():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(600, 4))
    labels = np.arange(600) % 3  # class means all near zero
    lda = fit_lda(x, labels, 2)
    _, sw = _scatters(x, labels)
    gram = lda.projection.T @ sw @ lda.projection
    np.testing.assert_allclose(gram, np.eye(2), atol=1e-6)


def _scatters(x, labels):
    overall = x.mean(axis=0)
    sb = np.zeros((x.shape[1], x.shape[1]))
    sw = np.zeros_like(sb)
    for cls in set(labels.tolist()):
        rows = x[labels == cls]
        d = rows.mean(0) - overall
        sb += rows.shape[0] * np.outer(d, d)
        c = rows - rows.mean(0)
        sw += c.T @ c
    return sb / x.shape[0], sw / x.shape[0]


def test_lda_beats_random_projections():
    x, labels = _two_cov_data(7, num_speakers=12, utts=30, between=(3.0, 2.0, 0.1, 0.1),
                              within=(1.0, 1.0, 1.0, 1.0))
    lda = fit_lda(x, labels, 2)
    sb, sw = _scatters(x, labels)

    def ratio(p):
        return np.trace(p.T @ sb @ p) / np.trace(p.T @ sw @ p)

    rng = np.random.default_rng(8)
    lda_ratio = ratio(lda.projection)
    for _ in range(20):
        q, _ = np.linalg.qr(rng.normal(size=(4, 2)))
        assert lda_ratio >= ratio(q) - 1e-12


def test_lda_rank_cap_warns_and_caps():
    x, labels = _two_cov_data(9, num_speakers=3, utts=20)
    lda = fit_lda(x, labels, 5)  # only 2 classes-1 = 2 feasible, dim 2
    assert lda.projection.shape[1] == 2
    with pytest.raises(ValueError):
        fit_lda(x, np.zeros_like(labels), 1)  # single class


# ------------------------------------------------------------------------ PLDA

def test_plda_recovers_generating_covariances():
    # 400 speakers keeps the sampling noise of the between-covariance draw
    # itself (~7% rel.) inside the 15% recovery budget
    between, within = (2.0, 1.0), (0.5, 1.5)
    x, labels = _two_cov_data(10, num_speakers=400, utts=10, between=between, within=within)
    model = train_plda(x, labels, num_iters=50)
    np.testing.assert_allclose(np.diag(model.between_cov), between, rtol=0.15)
    np.testing.assert_allclose(np.diag(model.within_cov), within, rtol=0.15)
    assert abs(model.between_cov[0, 1]) < 0.15
    assert abs(model.within_cov[0, 1]) < 0.05


def test_plda_loglik_nondecreasing():
    x, labels = _two_cov_data(11, num_speakers=40, utts=6)
    model = train_plda(x, labels, num_iters=10)
    lls = np.array(model.em_log_likelihoods)
    assert lls.size == 10
    assert np.all(np.diff(lls) >= -1e-8 * np.abs(lls[:-1]))


def test_plda_single_utterance_speakers_terminates():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(30, 3))
    labels = np.arange(30)
    model = train_plda(x, labels, num_iters=10)
    eigvals = np.linalg.eigvalsh(model.within_cov)
    assert np.all(eigvals > 0)
    assert np.all(np.linalg.eigvalsh(model.between_cov) > -1e-12)


def test_plda_requires_two_speakers():
    with pytest.raises(ValueError):
        train_plda(np.random.default_rng(0).normal(size=(10, 2)), np.zeros(10), 5)


# --------------------------------------------------------------------- scoring

def test_score_zero_between_gives_zero_llr():
    model = PldaModel(np.zeros(2), np.zeros((2, 2)), np.eye(2))
    rng = np.random.default_rng(13)
    for _ in range(5):
        e, t = rng.normal(size=2), rng.normal(size=2)
        assert score_plda(model, e, t) == pytest.approx(0.0, abs=1e-10)


def test_score_symmetry():
    x, labels = _two_cov_data(14, num_speakers=30, utts=5)
    model = train_plda(x, labels, num_iters=10)
    rng = np.random.default_rng(15)
    for _ in range(10):
        e, t = rng.normal(size=2), rng.normal(size=2)
        assert score_plda(model, e, t) == pytest.approx(score_plda(model, t, e), abs=1e-10)


def test_score_same_beats_opposite_with_strong_between():
    model = PldaModel(np.zeros(2), 10.0 * np.eye(2), 0.1 * np.eye(2))
    v = np.array([1.0, 2.0])
    assert score_plda(model, v, v) > score_plda(model, v, -v)


def test_score_batch_matches_single():
    x, labels = _two_cov_data(16, num_speakers=25, utts=4)
    model = train_plda(x, labels, num_iters=5)
    rng = np.random.default_rng(17)
    enroll = rng.normal(size=(8, 2))
    test = rng.normal(size=(8, 2))
    batch = score_plda_trials(model, enroll, test)
    for i in range(8):
        assert batch[i] == pytest.approx(score_plda(model, enroll[i], test[i]), abs=1e-12)


def test_target_scores_exceed_nontarget_on_structured_data():
    x, labels = _two_cov_data(18, num_speakers=40, utts=6)
    model = train_plda(x, labels, num_iters=15)
    # fresh draws from the same generative model
    rng = np.random.default_rng(19)
    spk = rng.normal(size=(50, 2)) * np.sqrt([2.0, 1.0])
    e = spk + rng.normal(size=(50, 2)) * np.sqrt([0.5, 1.5])
    t_same = spk + rng.normal(size=(50, 2)) * np.sqrt([0.5, 1.5])
    t_diff = np.roll(spk, 1, axis=0) + rng.normal(size=(50, 2)) * np.sqrt([0.5, 1.5])
    tgt = score_plda_trials(model, e, t_same).mean()
    non = score_plda_trials(model, e, t_diff).mean()
    assert tgt > non
    cos_tgt = np.mean([cosine_score(a, b) for a, b in zip(e, t_same)])
    cos_non = np.mean([cosine_score(a, b) for a, b in zip(e, t_diff)])
    assert cos_tgt > cos_non


def test_rotation_equivariance_of_backend_pipeline():
    x, labels = _two_cov_data(20, num_speakers=30, utts=6, between=(2.0, 1.0, 0.5),
                              within=(1.0, 0.7, 1.2))
    rng = np.random.default_rng(21)
    pairs = rng.integers(0, x.shape[0], size=(15, 2))

    def scores(data):
        wt = fit_whitener(data)
        proj = length_normalize(apply_whitener(wt, data))
        model = train_plda(proj, labels, num_iters=10)
        return np.array([score_plda(model, proj[i], proj[j]) for i, j in pairs])

    rotation = ortho_group.rvs(3, random_state=22)
    base = scores(x)
    rotated = scores(x @ rotation.T)
    np.testing.assert_allclose(rotated, base, atol=1e-8)


# ---------------------------------------------------------------- cosine score

def test_cosine_score_cases():
    a = np.array([1.0, 1.0])
    assert cosine_score(a, a) == pytest.approx(1.0)
    assert cosine_score(a, np.array([1.0, -1.0])) == pytest.approx(0.0, abs=1e-15)
    assert cosine_score(2.0 * a, np.array([0.5, 2.0])) == pytest.approx(
        cosine_score(a, np.array([0.5, 2.0]))
    )
    with pytest.raises(ValueError):
        cosine_score(a, np.zeros(2))


# --------------------------------------------------------------------- file IO

def test_backend_round_trip(tmp_path):
    x, labels = _two_cov_data(23, num_speakers=20, utts=5)
    wt = fit_whitener(x)
    model = train_plda(x, labels, num_iters=5)
    lda = LdaTransform(np.eye(2))
    path = tmp_path / "backend.json"
    save_backend(path, wt, model, lda)
    wt2, model2, lda2 = load_backend(path)
    np.testing.assert_array_equal(wt2.transform, wt.transform)
    np.testing.assert_array_equal(model2.between_cov, model.between_cov)
    np.testing.assert_array_equal(lda2.projection, lda.projection)
    save_backend(path, wt, model, None)
    _, _, lda3 = load_backend(path)
    assert lda3 is None
