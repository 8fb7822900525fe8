"""One-class anomaly detection on precomputed embeddings, with training-set
refinement under pollution and a seeded experiment harness."""

from .detectors import DetectorConfig, DetectorKind, FittedDetector, ScoreMap, fit, score_set
from .metrics import au_iou, au_pro, refinement_prf, roc_auc
from .pollution import PollutionPlan, build_pollution_plan
from .refine import (
    RefinementConfig,
    RefinementOutcome,
    RefinementStrategy,
    cross_detector_pipeline,
    refine,
)
from .tensors import (
    AlignedPatchGrid,
    EmbeddingSet,
    FeatureLevel,
    align_and_concat,
    concat_pooled_levels,
    global_average_pool,
    load_array_npy,
    load_embedding_set,
    save_array_npy,
)

__version__ = "0.1.0"

__all__ = [
    "AlignedPatchGrid",
    "DetectorConfig",
    "DetectorKind",
    "EmbeddingSet",
    "FeatureLevel",
    "FittedDetector",
    "PollutionPlan",
    "RefinementConfig",
    "RefinementOutcome",
    "RefinementStrategy",
    "ScoreMap",
    "align_and_concat",
    "au_iou",
    "au_pro",
    "build_pollution_plan",
    "concat_pooled_levels",
    "cross_detector_pipeline",
    "fit",
    "global_average_pool",
    "load_array_npy",
    "load_embedding_set",
    "refine",
    "refinement_prf",
    "roc_auc",
    "save_array_npy",
    "score_set",
]
