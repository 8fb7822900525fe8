"""Training-set refinement: score the (polluted) training samples and drop
the top-scoring fraction.

Four strategies share the same removal rule and differ only in how each
sample's score is produced:

* sroc: one detector fitted on the full set scores that same set.
* random: seeded uniform choice, no detector at all.
* cross_validation: s equal splits; each split scored by a detector fitted
  on the other s-1.
* stoc: s equal splits; one detector per split scores the whole set and the
  per-sample scores are averaged. Single pass, not iterated.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .detectors import DetectorConfig, DetectorKind, FittedDetector, fit, image_scores, score_set
from .errors import ConfigError, InsufficientDataError
from .metrics import PrecisionRecallF1, refinement_prf
from .tensors import EmbeddingSet

logger = logging.getLogger(__name__)


class RefinementStrategy(Enum):
    SROC = "sroc"
    RANDOM = "random"
    CROSS_VALIDATION = "cross_validation"
    STOC = "stoc"

    @classmethod
    def parse(cls, name: str) -> "RefinementStrategy":
        try:
            return cls(name.strip().lower().replace("-", "_"))
        except ValueError:
            raise ConfigError(
                f"unknown refinement strategy {name!r}; expected one of "
                f"{[s.value for s in cls]}"
            )


@dataclass(frozen=True)
class RefinementConfig:
    strategy: RefinementStrategy
    refinement_ratio: float
    refiner_kind: DetectorKind = DetectorKind.MAHALANOBIS
    splits: int = 5
    seed: int = 0
    detector: DetectorConfig | None = None

    def __post_init__(self):
        if not 0.0 <= self.refinement_ratio < 1.0:
            raise ConfigError(
                f"refinement_ratio must be in [0, 1), got {self.refinement_ratio}"
            )
        min_splits = 2 if self.strategy is RefinementStrategy.CROSS_VALIDATION else 1
        if self.strategy in (
            RefinementStrategy.CROSS_VALIDATION,
            RefinementStrategy.STOC,
        ) and self.splits < min_splits:
            raise ConfigError(
                f"{self.strategy.value} needs at least {min_splits} splits"
            )

    def detector_config(self) -> DetectorConfig:
        if self.detector is not None:
            return self.detector
        return DetectorConfig(kind=self.refiner_kind)


@dataclass
class RefinementOutcome:
    """Kept/removed partition of the training ids with per-sample scores."""

    kept_ids: tuple[str, ...]
    removed_ids: tuple[str, ...]
    scores: dict[str, float]
    prf: PrecisionRecallF1 | None = None
    kept_indices: np.ndarray = field(default=None, repr=False)
    removed_indices: np.ndarray = field(default=None, repr=False)

    def to_json(self, indent: int | None = None) -> str:
        doc = {
            "kept": list(self.kept_ids),
            "removed": list(self.removed_ids),
            "scores": {k: float(v) for k, v in self.scores.items()},
            "prf": None
            if self.prf is None
            else {
                "precision": self.prf.precision,
                "recall": self.prf.recall,
                "f1": self.prf.f1,
            },
        }
        return json.dumps(doc, indent=indent, sort_keys=True)


def _removal_count(ratio: float, n: int) -> int:
    count = int(np.floor(ratio * n))
    if count >= n:
        raise ConfigError(
            f"refinement ratio {ratio} would remove all {n} training samples"
        )
    return count


def _outcome_from_scores(
    train: EmbeddingSet,
    scores: np.ndarray,
    ratio: float,
    defective_ids: Sequence[str] | None,
) -> RefinementOutcome:
    """Drop the floor(ratio*N) highest-scoring samples; boundary ties are
    resolved by manifest order (and logged)."""
    n = train.n
    count = _removal_count(ratio, n)
    order = np.lexsort((np.arange(n), -scores))  # score desc, then index asc
    removed = np.sort(order[:count])
    kept = np.sort(order[count:])
    if 0 < count < n and scores[order[count - 1]] == scores[order[count]]:
        logger.warning(
            "refinement: score tie at the removal boundary (score=%g); "
            "broken by manifest order",
            scores[order[count]],
        )
    outcome = RefinementOutcome(
        kept_ids=tuple(train.sample_ids[i] for i in kept),
        removed_ids=tuple(train.sample_ids[i] for i in removed),
        scores={sid: float(s) for sid, s in zip(train.sample_ids, scores)},
        kept_indices=kept,
        removed_indices=removed,
    )
    if defective_ids is not None:
        outcome.prf = refinement_prf(outcome.removed_ids, defective_ids)
    return outcome


def _detector_scores(
    det_cfg: DetectorConfig, fit_on: EmbeddingSet, score_on: EmbeddingSet
) -> np.ndarray:
    det = fit(det_cfg.kind, fit_on, det_cfg)
    return image_scores(score_set(det, score_on))


def sroc(
    train: EmbeddingSet,
    cfg: RefinementConfig,
    defective_ids: Sequence[str] | None = None,
) -> RefinementOutcome:
    """Fit the refiner on the full polluted set, score the same set, and
    remove the top-scoring fraction."""
    if train.n == 0:
        raise InsufficientDataError("cannot refine an empty training set")
    scores = _detector_scores(cfg.detector_config(), train, train)
    return _outcome_from_scores(train, scores, cfg.refinement_ratio, defective_ids)


def random_refine(
    train: EmbeddingSet,
    cfg: RefinementConfig,
    defective_ids: Sequence[str] | None = None,
) -> RefinementOutcome:
    """Remove a seeded uniform sample of the training ids."""
    if train.n == 0:
        raise InsufficientDataError("cannot refine an empty training set")
    rng = np.random.default_rng(cfg.seed)
    count = _removal_count(cfg.refinement_ratio, train.n)
    chosen = rng.choice(train.n, size=count, replace=False)
    # removal by synthetic scores keeps one shared outcome-building path
    scores = np.zeros(train.n)
    scores[chosen] = 1.0
    return _outcome_from_scores(train, scores, cfg.refinement_ratio, defective_ids)


def _split_partition(n: int, splits: int, seed: int) -> list[np.ndarray]:
    """Seeded partition into `splits` parts with sizes differing by at most 1."""
    if splits > n:
        raise InsufficientDataError(
            f"cannot make {splits} splits from {n} samples"
        )
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, splits)]


def cross_validation_refine(
    train: EmbeddingSet,
    cfg: RefinementConfig,
    defective_ids: Sequence[str] | None = None,
) -> RefinementOutcome:
    """Each split is scored by a refiner fitted on the other s-1 splits."""
    parts = _split_partition(train.n, cfg.splits, cfg.seed)
    det_cfg = cfg.detector_config()
    scores = np.empty(train.n)
    for i, held_out in enumerate(parts):
        rest = np.sort(np.concatenate([p for j, p in enumerate(parts) if j != i]))
        try:
            scores[held_out] = _detector_scores(
                det_cfg, train.subset(rest), train.subset(held_out)
            )
        except InsufficientDataError as exc:
            raise InsufficientDataError(
                f"cross-validation split {i} too small for "
                f"{det_cfg.kind.name}: {exc}"
            )
    return _outcome_from_scores(train, scores, cfg.refinement_ratio, defective_ids)


def stoc_refine(
    train: EmbeddingSet,
    cfg: RefinementConfig,
    defective_ids: Sequence[str] | None = None,
) -> RefinementOutcome:
    """One refiner per split scores the whole training set; per-sample scores
    are the mean over the split models. Single pass, no iteration."""
    parts = _split_partition(train.n, cfg.splits, cfg.seed)
    det_cfg = cfg.detector_config()
    per_model = np.empty((len(parts), train.n))
    for i, part in enumerate(parts):
        try:
            per_model[i] = _detector_scores(det_cfg, train.subset(part), train)
        except InsufficientDataError as exc:
            raise InsufficientDataError(
                f"stoc split {i} too small for {det_cfg.kind.name}: {exc}"
            )
    return _outcome_from_scores(
        train, per_model.mean(axis=0), cfg.refinement_ratio, defective_ids
    )


_STRATEGIES = {
    RefinementStrategy.SROC: sroc,
    RefinementStrategy.RANDOM: random_refine,
    RefinementStrategy.CROSS_VALIDATION: cross_validation_refine,
    RefinementStrategy.STOC: stoc_refine,
}


def refine(
    train: EmbeddingSet,
    cfg: RefinementConfig,
    defective_ids: Sequence[str] | None = None,
) -> RefinementOutcome:
    """Dispatch to the configured strategy."""
    return _STRATEGIES[cfg.strategy](train, cfg, defective_ids)


def cross_detector_pipeline(
    train: EmbeddingSet,
    refiner: DetectorKind,
    final: DetectorKind,
    ratio: float,
    seed: int = 0,
    defective_ids: Sequence[str] | None = None,
    final_config: DetectorConfig | None = None,
) -> tuple[RefinementOutcome, FittedDetector]:
    """Refine with one detector kind, then fit another on the kept samples."""
    cfg = RefinementConfig(
        strategy=RefinementStrategy.SROC,
        refinement_ratio=ratio,
        refiner_kind=refiner,
        seed=seed,
    )
    outcome = sroc(train, cfg, defective_ids)
    kept = train.subset(outcome.kept_indices)
    final_det = fit(final, kept, final_config)
    return outcome, final_det
