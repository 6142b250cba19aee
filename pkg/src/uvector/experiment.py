"""End-to-end synthetic experiment: corpus, models, scoring, reports.

`run_experiment` mirrors the classic noisy-evaluation table: a clean-trained
system is evaluated on clean, noisy and enhanced features, then with the
three uncertainty-propagation variants on the enhanced features plus oracle
uncertainty.  Everything is seeded; summaries are byte-stable across worker
counts because per-utterance work is order-preserved.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import corpus as corpus_mod
from .backend import (
    LdaTransform,
    PldaModel,
    WhitenTransform,
    apply_lda,
    apply_whitener,
    fit_lda,
    fit_whitener,
    length_normalize,
    score_plda_trials,
    train_plda,
)
from .corpus import (
    CorpusBundle,
    CorruptionSpec,
    GenerativeSpec,
    derive_seed,
    oracle_uncertainty,
    synth_corpus,
    synth_tv,
    synth_ubm,
    wiener_enhance,
)
from .extractor import TvModel, extract, extract_baseline, save_tv, train_tv
from .frontend import FeatureMatrix, UncertaintySequence
from .metrics import (
    NONTARGET,
    TARGET,
    EvalReport,
    TrialList,
    evaluate_trials,
    fstat_cosine_report,
    write_scores,
    write_trials,
)
from .stats import accumulate_standard, accumulate_variants, normalize_stats
from .ubm import GmmModel, save_gmm, train_ubm

VARIANT_ORDER = (
    "baseline_clean",
    "baseline_noisy",
    "baseline_enhanced",
    "up_fa",
    "up_ubm",
    "up_proposed",
)


@dataclass
class CorpusSection:
    num_train_speakers: int = 40
    train_utts_per_speaker: int = 8
    num_eval_speakers: int = 20
    eval_utts_per_speaker: int = 6
    enroll_utts_per_speaker: int = 1
    frames_per_utt: int = 200
    feature_dim: int = 20
    speaker_shift_scale: float = 1.5
    tv_scale: float = 0.15


@dataclass
class FrontendSection:
    num_ceps: int = 13
    append_log_energy: bool = True
    window_ms: float = 25.0
    hop_ms: float = 10.0
    num_mel_filters: int = 24
    delta_window: int = 2
    sample_rate_hz: float = 16000.0


@dataclass
class UbmSection:
    num_components: int = 64
    num_iters: int = 10


@dataclass
class TvSection:
    ivector_dim: int = 32
    num_iters: int = 10


@dataclass
class BackendSection:
    lda_dim: int | None = None
    plda_iters: int = 20


@dataclass
class UncertaintySection:
    snr_db: float = 5.0
    noise_kind: str = "white"
    ar_coefficient: float = 0.0
    # multiplier on the oracle uncertainty; 0 exercises the exact collapse
    # of every propagation variant onto the enhanced baseline
    oracle_scale: float = 1.0


@dataclass
class TrialsSection:
    # All enroll x test pairs are scored; extra knobs may land here later.
    max_trials: int | None = None


@dataclass
class OutputSection:
    num_hist_bins: int = 30


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    frontend: FrontendSection = field(default_factory=FrontendSection)
    ubm: UbmSection = field(default_factory=UbmSection)
    tv: TvSection = field(default_factory=TvSection)
    backend: BackendSection = field(default_factory=BackendSection)
    uncertainty: UncertaintySection = field(default_factory=UncertaintySection)
    trials: TrialsSection = field(default_factory=TrialsSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTION_TYPES = {
    "corpus": CorpusSection,
    "frontend": FrontendSection,
    "ubm": UbmSection,
    "tv": TvSection,
    "backend": BackendSection,
    "uncertainty": UncertaintySection,
    "trials": TrialsSection,
    "output": OutputSection,
}


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Overlay a (possibly partial) mapping onto the default configuration."""
    doc = dict(doc or {})
    kwargs = {}
    if "seed" in doc:
        kwargs["seed"] = int(doc.pop("seed"))
    for name, cls in _SECTION_TYPES.items():
        section = doc.pop(name, None)
        if section is None:
            continue
        valid = {f.name for f in dataclasses.fields(cls)}
        unknown = set(section) - valid
        if unknown:
            raise ValueError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
        kwargs[name] = cls(**section)
    if doc:
        raise ValueError(f"unknown top-level config keys: {sorted(doc)}")
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    doc = yaml.safe_load(Path(path).read_text())
    return config_from_dict(doc or {})


@dataclass
class ExperimentResult:
    reports: dict[str, EvalReport]
    fstat_means: dict[str, dict[str, float]]
    fstat_rows: list[dict]
    trial_list: TrialList
    summary: dict
    models: dict = field(default_factory=dict)


def _mix_seed(seed: int, salt: int) -> int:
    return (seed & corpus_mod._MASK64) ^ corpus_mod._splitmix64(salt)


# Worker-side state for process pools: models are shipped once per worker
# rather than once per task.
_WORKER_CTX: dict = {}


def _init_worker(ctx: dict) -> None:
    _WORKER_CTX.update(ctx)


def _train_stats_task(fm: FeatureMatrix):
    return accumulate_standard(_WORKER_CTX["gmm"], fm)


def _eval_variants_task(args):
    """I-vectors for all method variants of one evaluation utterance.

    The enhanced-feature variants share posterior passes through
    `accumulate_variants`; results match the one-variant-at-a-time API.
    """
    clean, noisy, enhanced, unc = args
    gmm: GmmModel = _WORKER_CTX["gmm"]
    tv: TvModel = _WORKER_CTX["tv"]
    bundle = accumulate_variants(gmm, enhanced, unc)
    return {
        "baseline_clean": extract_baseline(tv, gmm, clean).mean,
        "baseline_noisy": extract_baseline(tv, gmm, noisy).mean,
        "baseline_enhanced": extract(tv, normalize_stats(gmm, bundle["standard"])).mean,
        "up_fa": extract(tv, bundle["fa"]).mean,
        "up_ubm": extract(tv, normalize_stats(gmm, bundle["ubm"])).mean,
        "up_proposed": extract(tv, bundle["proposed"]).mean,
        "stats_biased": bundle["standard"],
        "stats_unbiased": bundle["ubm"],
    }


def _map_ordered(task, items, ctx: dict, workers: int):
    """Order-preserving map, optionally over a process pool.

    Results do not depend on the worker count: tasks are pure functions of
    their item and the broadcast context.
    """
    if workers <= 1:
        _init_worker(ctx)
        return [task(item) for item in items]
    with ProcessPoolExecutor(
        max_workers=workers, initializer=_init_worker, initargs=(ctx,)
    ) as pool:
        return list(pool.map(task, items, chunksize=max(1, len(items) // (4 * workers))))


def make_trials(bundle: CorpusBundle, enroll_per_speaker: int) -> TrialList:
    """All enroll x test pairs; the first utterances of each speaker enroll."""
    enroll, test = [], []
    by_speaker: dict[str, list] = {}
    for utt in bundle.utterances:
        by_speaker.setdefault(utt.speaker_id, []).append(utt)
    for speaker_id in sorted(by_speaker):
        utts = by_speaker[speaker_id]
        if len(utts) <= enroll_per_speaker:
            raise ValueError(f"speaker {speaker_id} has no test utterances")
        enroll.extend(utts[:enroll_per_speaker])
        test.extend(utts[enroll_per_speaker:])
    trials = [
        (e.utt_id, t.utt_id, TARGET if e.speaker_id == t.speaker_id else NONTARGET)
        for e in enroll
        for t in test
    ]
    return TrialList(trials)


class BackendPipeline:
    """Whiten -> length-normalize -> (optional LDA) -> PLDA."""

    def __init__(
        self,
        whitener: WhitenTransform,
        plda: PldaModel,
        lda: LdaTransform | None = None,
    ):
        self.whitener = whitener
        self.plda = plda
        self.lda = lda

    def transform(self, vectors: np.ndarray) -> np.ndarray:
        out = length_normalize(apply_whitener(self.whitener, vectors))
        if self.lda is not None:
            out = apply_lda(self.lda, out)
        return out


def fit_backend(
    vectors: np.ndarray, labels, lda_dim: int | None, plda_iters: int
) -> BackendPipeline:
    whitener = fit_whitener(vectors)
    projected = length_normalize(apply_whitener(whitener, vectors))
    lda = None
    if lda_dim is not None:
        lda = fit_lda(projected, labels, lda_dim)
        projected = apply_lda(lda, projected)
    plda = train_plda(projected, labels, num_iters=plda_iters)
    return BackendPipeline(whitener, plda, lda)


def run_experiment(
    config: ExperimentConfig, out_dir=None, workers: int = 1
) -> ExperimentResult:
    """Run the full pipeline and score every method variant.

    :param config: experiment configuration (see `ExperimentConfig`)
    :param out_dir: when given, models, score files, reports and the summary
        JSON are written there
    :param workers: process-pool width for per-utterance stages; any value
        yields byte-identical summaries
    """
    cfg = config
    cc = cfg.corpus

    gen_train = GenerativeSpec(
        num_speakers=cc.num_train_speakers,
        utts_per_speaker=cc.train_utts_per_speaker,
        frames_per_utt=cc.frames_per_utt,
        feature_dim=cc.feature_dim,
        num_components=cfg.ubm.num_components,
        ivector_dim=cfg.tv.ivector_dim,
        speaker_shift_scale=cc.speaker_shift_scale,
        rng_seed=_mix_seed(cfg.seed, 1),
    )
    gmm_true = synth_ubm(gen_train)
    tv_true = synth_tv(gen_train, gmm_true, scale=cc.tv_scale)
    train_bundle = synth_corpus(gen_train, gmm_true, tv_true)

    gen_eval = dataclasses.replace(
        gen_train,
        num_speakers=cc.num_eval_speakers,
        utts_per_speaker=cc.eval_utts_per_speaker,
        rng_seed=_mix_seed(cfg.seed, 2),
    )
    eval_bundle = synth_corpus(gen_eval, gmm_true, tv_true)

    # system training on the clean training corpus
    train_features = [u.features for u in train_bundle.utterances]
    gmm = train_ubm(
        train_features, cfg.ubm.num_components, cfg.ubm.num_iters, seed=_mix_seed(cfg.seed, 3)
    )
    train_stats = _map_ordered(_train_stats_task, train_features, {"gmm": gmm}, workers)
    tv = train_tv(
        train_stats, gmm, cfg.tv.ivector_dim, cfg.tv.num_iters, seed=_mix_seed(cfg.seed, 4)
    )

    train_nstats = [normalize_stats(gmm, s) for s in train_stats]
    train_vectors = np.stack([extract(tv, ns).mean for ns in train_nstats])
    train_labels = [u.speaker_id for u in train_bundle.utterances]
    backend = fit_backend(train_vectors, train_labels, cfg.backend.lda_dim, cfg.backend.plda_iters)

    # evaluation views: clean, noisy, enhanced + oracle uncertainty
    eval_items = []
    for idx, utt in enumerate(eval_bundle.utterances):
        noise_spec = CorruptionSpec(
            target_snr_db=cfg.uncertainty.snr_db,
            noise_kind=cfg.uncertainty.noise_kind,
            ar_coefficient=cfg.uncertainty.ar_coefficient,
            rng_seed=_mix_seed(cfg.seed, 5) ^ corpus_mod._splitmix64(idx),
        )
        noisy = corpus_mod.corrupt(utt.features, noise_spec)
        enhanced = wiener_enhance(utt.features, noisy, gmm)
        unc = oracle_uncertainty(utt.features, enhanced)
        if cfg.uncertainty.oracle_scale != 1.0:
            unc = UncertaintySequence(
                cfg.uncertainty.oracle_scale * unc.diag_vars, utt_id=unc.utt_id
            )
        eval_items.append((utt.features, noisy, enhanced, unc))

    per_utt = _map_ordered(_eval_variants_task, eval_items, {"gmm": gmm, "tv": tv}, workers)

    eval_ids = [u.utt_id for u in eval_bundle.utterances]
    trial_list = make_trials(eval_bundle, cc.enroll_utts_per_speaker)
    labels = trial_list.labels()

    reports: dict[str, EvalReport] = {}
    scores_by_variant: dict[str, np.ndarray] = {}
    for variant in VARIANT_ORDER:
        vectors = np.stack([row[variant] for row in per_utt])
        projected = backend.transform(vectors)
        index = {utt_id: i for i, utt_id in enumerate(eval_ids)}
        enroll_rows = np.stack([projected[index[e]] for e, _, _ in trial_list.trials])
        test_rows = np.stack([projected[index[t]] for _, t, _ in trial_list.trials])
        scores = score_plda_trials(backend.plda, enroll_rows, test_rows)
        scores_by_variant[variant] = scores
        reports[variant] = evaluate_trials(scores, labels, num_bins=cfg.output.num_hist_bins)

    stats_biased = {utt_id: row["stats_biased"] for utt_id, row in zip(eval_ids, per_utt)}
    stats_unbiased = {utt_id: row["stats_unbiased"] for utt_id, row in zip(eval_ids, per_utt)}
    fstat_rows, fstat_means = fstat_cosine_report(trial_list, stats_biased, stats_unbiased)

    summary = {
        "seed": cfg.seed,
        "variant_order": list(VARIANT_ORDER),
        "variants": {
            variant: {
                "eer": reports[variant].eer,
                "threshold": reports[variant].eer_threshold,
                "n_trials": reports[variant].n_trials,
            }
            for variant in VARIANT_ORDER
        },
        "fstat_cosine_means": fstat_means,
        "config": cfg.to_dict(),
    }

    result = ExperimentResult(
        reports=reports,
        fstat_means=fstat_means,
        fstat_rows=fstat_rows,
        trial_list=trial_list,
        summary=summary,
        models={"gmm": gmm, "tv": tv, "backend": backend},
    )
    if out_dir is not None:
        _write_outputs(Path(out_dir), result, scores_by_variant, gmm, tv, trial_list)
    return result


def summary_json(summary: dict) -> str:
    """Canonical serialization: key-sorted, repr floats, trailing newline."""
    return json.dumps(summary, sort_keys=True, indent=2) + "\n"


def _write_outputs(out, result: ExperimentResult, scores_by_variant, gmm, tv, trial_list):
    out.mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(exist_ok=True)
    save_gmm(out / "models" / "gmm.json", gmm)
    save_tv(out / "models" / "tv.uvtv", tv)
    write_trials(out / "trials.tsv", trial_list)
    for variant, scores in scores_by_variant.items():
        rows = [
            (e, t, float(s), label)
            for (e, t, label), s in zip(trial_list.trials, scores)
        ]
        write_scores(out / f"scores_{variant}.csv", rows)
        report = result.reports[variant]
        det_doc = {
            "eer": report.eer,
            "points": [[fa, miss] for fa, miss in report.det_points],
        }
        (out / f"det_{variant}.json").write_text(json.dumps(det_doc))
        (out / f"hist_{variant}.json").write_text(json.dumps(report.histograms))
    with open(out / "fstat_cosine.csv", "w", newline="") as handle:
        import csv as _csv

        writer = _csv.writer(handle)
        writer.writerow(["enroll", "test", "label", "dist_biased", "dist_unbiased"])
        for row in result.fstat_rows:
            writer.writerow(
                [
                    row["enroll"],
                    row["test"],
                    row["label"],
                    repr(row["dist_biased"]),
                    repr(row["dist_unbiased"]),
                ]
            )
    (out / "summary.json").write_text(summary_json(result.summary))
