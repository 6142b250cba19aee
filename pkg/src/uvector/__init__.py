"""i-vector speaker verification with statistical uncertainty propagation."""

from .backend import (
    LdaTransform,
    PldaModel,
    WhitenTransform,
    cosine_score,
    fit_lda,
    fit_whitener,
    length_normalize,
    score_plda,
    train_plda,
)
from .corpus import (
    CorpusBundle,
    CorruptionSpec,
    GenerativeSpec,
    corrupt,
    oracle_uncertainty,
    synth_corpus,
    synth_tv,
    synth_ubm,
    wiener_enhance,
)
from .experiment import ExperimentConfig, run_experiment
from .extractor import (
    IVector,
    TvModel,
    extract,
    extract_baseline,
    extract_direct,
    extract_fa_uncertain,
    extract_proposed,
    extract_ubm_uncertain,
    train_tv,
)
from .frontend import (
    FeatureMatrix,
    MfccConfig,
    UncertaintySequence,
    append_deltas,
    cmvn,
    energy_vad,
    extract_mfcc,
    scale_uncertainty,
)
from .metrics import EvalReport, TrialList, compute_eer, det_points, score_histogram
from .stats import (
    BwStats,
    NormalizedStats,
    accumulate_fa_uncertain,
    accumulate_proposed,
    accumulate_standard,
    accumulate_ubm_uncertain,
    fstat_cosine,
    merge_stats,
    normalize_stats,
    wiener_gain,
)
from .ubm import FramePosteriors, GmmModel, posteriors, posteriors_uncertain, train_ubm

__version__ = "0.1.0"

__all__ = [
    "BwStats",
    "CorpusBundle",
    "CorruptionSpec",
    "EvalReport",
    "ExperimentConfig",
    "FeatureMatrix",
    "FramePosteriors",
    "GenerativeSpec",
    "GmmModel",
    "IVector",
    "LdaTransform",
    "MfccConfig",
    "NormalizedStats",
    "PldaModel",
    "TrialList",
    "TvModel",
    "UncertaintySequence",
    "WhitenTransform",
    "accumulate_fa_uncertain",
    "accumulate_proposed",
    "accumulate_standard",
    "accumulate_ubm_uncertain",
    "append_deltas",
    "cmvn",
    "compute_eer",
    "corrupt",
    "cosine_score",
    "det_points",
    "energy_vad",
    "extract",
    "extract_baseline",
    "extract_direct",
    "extract_fa_uncertain",
    "extract_mfcc",
    "extract_proposed",
    "extract_ubm_uncertain",
    "fit_lda",
    "fit_whitener",
    "fstat_cosine",
    "length_normalize",
    "merge_stats",
    "normalize_stats",
    "oracle_uncertainty",
    "posteriors",
    "posteriors_uncertain",
    "run_experiment",
    "scale_uncertainty",
    "score_histogram",
    "score_plda",
    "synth_corpus",
    "synth_tv",
    "synth_ubm",
    "train_plda",
    "train_tv",
    "train_ubm",
    "wiener_enhance",
    "wiener_gain",
]
