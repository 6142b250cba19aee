"""Command-line interface for the full experiment pipeline.

Every subcommand accepts `--config` (YAML, partial overrides of the
defaults) and `--seed`; staged commands exchange data through a corpus
directory (`manifest.tsv` plus feature subdirectories) and the model file
formats defined by the library modules.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import click
import numpy as np

from . import corpus as corpus_mod
from .backend import load_backend, save_backend, score_plda_trials
from .corpus import (
    CorruptionSpec,
    GenerativeSpec,
    oracle_uncertainty,
    synth_corpus,
    synth_tv,
    synth_ubm,
    wiener_enhance,
    write_corpus,
)
from .experiment import (
    ExperimentConfig,
    fit_backend,
    load_config,
    make_trials,
    run_experiment,
    summary_json,
)
from .extractor import (
    extract,
    extract_fa_uncertain,
    extract_proposed,
    extract_ubm_uncertain,
    load_tv,
    read_ivectors,
    save_tv,
    train_tv,
    write_ivectors,
)
from .frontend import (
    MfccConfig,
    append_deltas,
    cmvn,
    energy_vad,
    extract_mfcc,
    read_features,
    read_uncertainty,
    write_features,
    write_uncertainty,
)
from .metrics import evaluate_trials, read_scores, read_trials, write_scores, write_trials
from .stats import (
    accumulate_fa_uncertain,
    accumulate_proposed,
    accumulate_standard,
    accumulate_ubm_uncertain,
    normalize_stats,
    write_stats,
)
from .ubm import load_gmm, save_gmm, train_ubm

VARIANTS = ("standard", "fa", "ubm", "proposed")


def _load_cfg(config_path, seed) -> ExperimentConfig:
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    if seed is not None:
        cfg.seed = seed
    return cfg


def _read_manifest(corpus_dir: Path) -> list[tuple[str, str, str]]:
    rows = []
    with open(corpus_dir / "manifest.tsv", newline="") as handle:
        for utt_id, speaker_id, rel in csv.reader(handle, delimiter="\t"):
            rows.append((utt_id, speaker_id, rel))
    return rows


def _load_feature_set(corpus_dir: Path, subdir: str):
    feats = []
    for utt_id, speaker_id, rel in _read_manifest(corpus_dir):
        path = corpus_dir / subdir / Path(rel).name if subdir != "features" else corpus_dir / rel
        feats.append((utt_id, speaker_id, read_features(path, utt_id=utt_id)))
    return feats


seed_option = click.option("--seed", type=int, default=None, help="Override the config seed.")
config_option = click.option(
    "--config", "config_path", type=click.Path(exists=True), default=None,
    help="YAML config with partial overrides.",
)


@click.group()
def main():
    """i-vector speaker verification with uncertainty propagation."""


@main.command()
@config_option
@seed_option
@click.option("--out", required=True, type=click.Path(), help="Corpus output directory.")
@click.option("--role", type=click.Choice(["train", "eval"]), default="train",
              help="Which corpus section sizes to use.")
@click.option("--with-noise", is_flag=True,
              help="Also write noisy/enhanced/uncertainty views at the configured SNR.")
def synth(config_path, seed, out, role, with_noise):
    """Generate a synthetic corpus (and optionally its corrupted views)."""
    cfg = _load_cfg(config_path, seed)
    cc = cfg.corpus
    speakers = cc.num_train_speakers if role == "train" else cc.num_eval_speakers
    utts = cc.train_utts_per_speaker if role == "train" else cc.eval_utts_per_speaker
    spec = GenerativeSpec(
        num_speakers=speakers,
        utts_per_speaker=utts,
        frames_per_utt=cc.frames_per_utt,
        feature_dim=cc.feature_dim,
        num_components=cfg.ubm.num_components,
        ivector_dim=cfg.tv.ivector_dim,
        speaker_shift_scale=cc.speaker_shift_scale,
        rng_seed=cfg.seed if role == "train" else cfg.seed + 1,
    )
    gmm = synth_ubm(spec)
    tv = synth_tv(spec, gmm, scale=cc.tv_scale)
    bundle = synth_corpus(spec, gmm, tv)
    out = Path(out)
    write_corpus(bundle, out)
    write_trials(out / "trials.tsv", make_trials(bundle, cc.enroll_utts_per_speaker))

    if with_noise:
        for sub in ("noisy", "enhanced", "uncertainty"):
            (out / sub).mkdir(exist_ok=True)
        for idx, utt in enumerate(bundle.utterances):
            noise_spec = CorruptionSpec(
                target_snr_db=cfg.uncertainty.snr_db,
                noise_kind=cfg.uncertainty.noise_kind,
                ar_coefficient=cfg.uncertainty.ar_coefficient,
                rng_seed=spec.rng_seed ^ corpus_mod._splitmix64(idx),
            )
            noisy = corpus_mod.corrupt(utt.features, noise_spec)
            enhanced = wiener_enhance(utt.features, noisy, gmm)
            unc = oracle_uncertainty(utt.features, enhanced)
            write_features(out / "noisy" / f"{utt.utt_id}.uvfm", noisy)
            write_features(out / "enhanced" / f"{utt.utt_id}.uvfm", enhanced)
            write_uncertainty(out / "uncertainty" / f"{utt.utt_id}.uvun", unc)
    click.echo(f"wrote corpus with {len(bundle.utterances)} utterances to {out}")


@main.command()
@config_option
@seed_option
@click.option("--wav-dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="Feature output directory.")
def features(config_path, seed, wav_dir, out):
    """MFCC + deltas + VAD + CMVN for every WAV file in a directory."""
    import scipy.io.wavfile

    cfg = _load_cfg(config_path, seed)
    fe = cfg.frontend
    mfcc_cfg = MfccConfig(
        num_ceps=fe.num_ceps,
        append_log_energy=fe.append_log_energy,
        window_ms=fe.window_ms,
        hop_ms=fe.hop_ms,
        num_mel_filters=fe.num_mel_filters,
        delta_window=fe.delta_window,
        sample_rate_hz=fe.sample_rate_hz,
    )
    out = Path(out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rows = []
    for wav in sorted(Path(wav_dir).glob("*.wav")):
        rate, samples = scipy.io.wavfile.read(wav)
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim > 1:
            samples = samples[:, 0]
        local_cfg = mfcc_cfg if rate == mfcc_cfg.sample_rate_hz else MfccConfig(
            num_ceps=fe.num_ceps,
            append_log_energy=fe.append_log_energy,
            window_ms=fe.window_ms,
            hop_ms=fe.hop_ms,
            num_mel_filters=fe.num_mel_filters,
            delta_window=fe.delta_window,
            sample_rate_hz=float(rate),
        )
        fm = extract_mfcc(samples, local_cfg, utt_id=wav.stem)
        fm = append_deltas(fm, local_cfg.delta_window)
        fm = energy_vad(fm)
        fm, _ = cmvn(fm)
        rel = f"features/{wav.stem}.uvfm"
        write_features(out / rel, fm)
        speaker = wav.stem.split("_")[0]
        rows.append((wav.stem, speaker, rel))
    with open(out / "manifest.tsv", "w", newline="") as handle:
        csv.writer(handle, delimiter="\t").writerows(rows)
    click.echo(f"extracted features for {len(rows)} files to {out}")


@main.command("train-ubm")
@config_option
@seed_option
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="Output GMM JSON path.")
def train_ubm_cmd(config_path, seed, corpus_dir, out):
    """EM-train the UBM on a corpus' clean features."""
    cfg = _load_cfg(config_path, seed)
    feats = [fm for _, _, fm in _load_feature_set(Path(corpus_dir), "features")]
    gmm = train_ubm(feats, cfg.ubm.num_components, cfg.ubm.num_iters, seed=cfg.seed)
    save_gmm(out, gmm)
    click.echo(f"trained C={gmm.num_components} UBM; final LL {gmm.em_log_likelihoods[-1]:.3f}")


@main.command("train-tv")
@config_option
@seed_option
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--ubm", "ubm_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="Output TV model path.")
def train_tv_cmd(config_path, seed, corpus_dir, ubm_path, out):
    """EM-train the total-variability matrix on standard statistics."""
    cfg = _load_cfg(config_path, seed)
    gmm = load_gmm(ubm_path)
    feats = [fm for _, _, fm in _load_feature_set(Path(corpus_dir), "features")]
    stats = [accumulate_standard(gmm, fm) for fm in feats]
    tv = train_tv(stats, gmm, cfg.tv.ivector_dim, cfg.tv.num_iters, seed=cfg.seed)
    save_tv(out, tv)
    click.echo(f"trained D={tv.ivector_dim} TV model; final objective {tv.em_auxiliary[-1]:.3f}")


def _variant_stats(variant, gmm, fm, unc):
    if variant == "standard":
        return accumulate_standard(gmm, fm)
    if variant == "fa":
        return accumulate_fa_uncertain(gmm, fm, unc)
    if variant == "ubm":
        return accumulate_ubm_uncertain(gmm, fm, unc)
    return accumulate_proposed(gmm, fm, unc)


@main.command("stats")
@config_option
@seed_option
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--ubm", "ubm_path", required=True, type=click.Path(exists=True))
@click.option("--variant", type=click.Choice(VARIANTS), default="standard")
@click.option("--features-subdir", default=None,
              help="Feature view to read (default: features, or enhanced for uncertainty variants).")
@click.option("--out", required=True, type=click.Path(), help="Statistics output directory.")
def stats_cmd(config_path, seed, corpus_dir, ubm_path, variant, features_subdir, out):
    """Accumulate per-utterance statistics for one method variant."""
    _load_cfg(config_path, seed)
    gmm = load_gmm(ubm_path)
    corpus_dir = Path(corpus_dir)
    subdir = features_subdir or ("features" if variant == "standard" else "enhanced")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for utt_id, _, fm in _load_feature_set(corpus_dir, subdir):
        unc = None
        if variant != "standard":
            unc = read_uncertainty(corpus_dir / "uncertainty" / f"{utt_id}.uvun", utt_id=utt_id)
        write_stats(out / f"{utt_id}.uvst", _variant_stats(variant, gmm, fm, unc))
        count += 1
    click.echo(f"wrote {count} {variant} statistics files to {out}")


@main.command("extract")
@config_option
@seed_option
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--ubm", "ubm_path", required=True, type=click.Path(exists=True))
@click.option("--tv", "tv_path", required=True, type=click.Path(exists=True))
@click.option("--variant", type=click.Choice(VARIANTS), default="standard")
@click.option("--features-subdir", default=None)
@click.option("--out", required=True, type=click.Path(), help="Output i-vector CSV.")
def extract_cmd(config_path, seed, corpus_dir, ubm_path, tv_path, variant, features_subdir, out):
    """Extract i-vectors for every utterance with one method variant."""
    _load_cfg(config_path, seed)
    gmm = load_gmm(ubm_path)
    tv = load_tv(tv_path)
    corpus_dir = Path(corpus_dir)
    subdir = features_subdir or ("features" if variant == "standard" else "enhanced")
    ivectors = []
    for utt_id, _, fm in _load_feature_set(corpus_dir, subdir):
        if variant == "standard":
            iv = extract(tv, normalize_stats(gmm, accumulate_standard(gmm, fm)))
        else:
            unc = read_uncertainty(corpus_dir / "uncertainty" / f"{utt_id}.uvun", utt_id=utt_id)
            fn = {
                "fa": extract_fa_uncertain,
                "ubm": extract_ubm_uncertain,
                "proposed": extract_proposed,
            }[variant]
            iv = fn(tv, gmm, fm, unc)
        iv.utt_id = utt_id
        ivectors.append(iv)
    write_ivectors(out, ivectors)
    click.echo(f"wrote {len(ivectors)} i-vectors to {out}")


@main.command("backend-train")
@config_option
@seed_option
@click.option("--ivectors", "ivectors_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True),
              help="Corpus directory supplying speaker labels via manifest.tsv.")
@click.option("--out", required=True, type=click.Path(), help="Output backend JSON.")
def backend_train_cmd(config_path, seed, ivectors_path, corpus_dir, out):
    """Fit whitening, optional LDA and PLDA on labeled i-vectors."""
    cfg = _load_cfg(config_path, seed)
    ids, mat = read_ivectors(ivectors_path)
    speaker_of = {u: s for u, s, _ in _read_manifest(Path(corpus_dir))}
    labels = [speaker_of[u] for u in ids]
    pipeline = fit_backend(mat, labels, cfg.backend.lda_dim, cfg.backend.plda_iters)
    save_backend(out, pipeline.whitener, pipeline.plda, pipeline.lda)
    click.echo(f"trained backend on {len(ids)} i-vectors")


@main.command("score")
@config_option
@seed_option
@click.option("--backend", "backend_path", required=True, type=click.Path(exists=True))
@click.option("--ivectors", "ivectors_path", required=True, type=click.Path(exists=True))
@click.option("--trials", "trials_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="Output scores CSV.")
def score_cmd(config_path, seed, backend_path, ivectors_path, trials_path, out):
    """PLDA-score a trial list against extracted i-vectors."""
    from .experiment import BackendPipeline

    whitener, plda, lda = load_backend(backend_path)
    pipeline = BackendPipeline(whitener, plda, lda)
    ids, mat = read_ivectors(ivectors_path)
    projected = pipeline.transform(mat)
    index = {utt_id: i for i, utt_id in enumerate(ids)}
    trial_list = read_trials(trials_path)
    enroll = np.stack([projected[index[e]] for e, _, _ in trial_list.trials])
    test = np.stack([projected[index[t]] for _, t, _ in trial_list.trials])
    scores = score_plda_trials(plda, enroll, test)
    write_scores(out, [
        (e, t, float(s), label)
        for (e, t, label), s in zip(trial_list.trials, scores)
    ])
    click.echo(f"scored {len(scores)} trials")


@main.command("eval")
@config_option
@seed_option
@click.option("--scores", "scores_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="Output report JSON.")
def eval_cmd(config_path, seed, scores_path, out):
    """EER/DET/histogram report from a scores CSV."""
    cfg = _load_cfg(config_path, seed)
    rows = read_scores(scores_path)
    scores = np.array([score for _, _, score, _ in rows])
    labels = np.array([label == "target" for _, _, _, label in rows])
    report = evaluate_trials(scores, labels, num_bins=cfg.output.num_hist_bins)
    Path(out).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    click.echo(f"EER {report.eer * 100:.2f}% at threshold {report.eer_threshold:.4f}")


@main.command("run")
@config_option
@seed_option
@click.option("--out", required=True, type=click.Path(), help="Experiment output directory.")
@click.option("--workers", type=int, default=1, show_default=True,
              help="Process-pool width; results are identical for any value.")
def run_cmd(config_path, seed, out, workers):
    """Full pipeline: synthesize, train, corrupt, propagate, score, report."""
    cfg = _load_cfg(config_path, seed)
    result = run_experiment(cfg, out_dir=Path(out), workers=workers)
    click.echo(summary_json(result.summary))


if __name__ == "__main__":
    main()
