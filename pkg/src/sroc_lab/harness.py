"""Experiment orchestration: polluted-set sweeps over detectors, refinement
strategies and seeds, plus the qualitative analyses (pairwise embedding
distances, Gaussian contour projections) and CSV report emission.

Sweep cells are independent (category x detector x ratio x seed); a bounded
worker pool sized by the SROC_WORKERS environment variable executes them and
rows are merged deterministically by cell key. Failed cells are persisted to
failures.json next to the partial report before the error propagates.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .detectors import (
    DEFAULT_SMOOTH_SIGMA,
    DetectorConfig,
    DetectorKind,
    fit,
    image_scores,
    score_set,
)
from .errors import ConfigError, DataError
from .gaussian import GaussianModel, ledoit_wolf
from .manifest import SampleRecord, load_manifest
from .metrics import iou_curve, pro_curve, roc_auc
from .pollution import PollutionPlan, build_pollution_plan, derive_seed
from .refine import RefinementConfig, RefinementStrategy, refine
from .tensors import EmbeddingSet, load_embedding_set

logger = logging.getLogger(__name__)

REPORT_COLUMNS = [
    "category",
    "detector",
    "strategy",
    "pollution",
    "refinement",
    "seed",
    "auc",
    "au_iou",
    "au_pro",
    "precision",
    "recall",
    "f1",
    "wall_time_s",
]

PIXEL_CAPABLE = (DetectorKind.KNN, DetectorKind.PADIM, DetectorKind.PATCHCORE)


class SweepError(DataError):
    """At least one sweep cell failed; partial results were persisted."""


@dataclass
class ReportRow:
    category: str
    detector: str
    strategy: str
    pollution: float
    refinement: float
    seed: int
    auc: float | None = None
    au_iou: float | None = None
    au_pro: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    wall_time_s: float = 0.0

    def key(self) -> tuple:
        return (
            self.category,
            self.detector,
            self.strategy,
            self.pollution,
            self.refinement,
            self.seed,
        )

    def csv_fields(self) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return f"{v:.10g}"
            return str(v)

        return [fmt(getattr(self, c)) for c in REPORT_COLUMNS]


@dataclass
class ExperimentReport:
    rows: list[ReportRow] = field(default_factory=list)

    def sorted(self) -> "ExperimentReport":
        return ExperimentReport(rows=sorted(self.rows, key=ReportRow.key))

    def to_csv_text(self) -> str:
        lines = [",".join(REPORT_COLUMNS)]
        lines.extend(",".join(row.csv_fields()) for row in self.rows)
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_text())


def read_report_csv(path: str | Path) -> ExperimentReport:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_COLUMNS:
            raise DataError(f"{path}: unexpected report header {reader.fieldnames}")
        for rec in reader:
            rows.append(
                ReportRow(
                    category=rec["category"],
                    detector=rec["detector"],
                    strategy=rec["strategy"],
                    pollution=float(rec["pollution"]),
                    refinement=float(rec["refinement"]),
                    seed=int(rec["seed"]),
                    **{
                        k: (float(rec[k]) if rec[k] else None)
                        for k in ("auc", "au_iou", "au_pro", "precision", "recall", "f1")
                    },
                    wall_time_s=float(rec["wall_time_s"] or 0.0),
                )
            )
    return ExperimentReport(rows=rows)


# ---------------------------------------------------------------------------
# Sweep configuration


DEFAULT_POLLUTION_GRID = [0.0, 0.05, 0.1, 0.15, 0.2]
DEFAULT_REFINEMENT_GRID = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]


@dataclass
class SweepConfig:
    manifest: str
    levels: list[str]
    category: str = "default"
    level_ids: list[int] | None = None
    detectors: list[str] = field(
        default_factory=lambda: [k.value for k in DetectorKind]
    )
    pollution_ratios: list[float] = field(
        default_factory=lambda: list(DEFAULT_POLLUTION_GRID)
    )
    refinement_ratios: list[float] = field(
        default_factory=lambda: list(DEFAULT_REFINEMENT_GRID)
    )
    strategies: list[str] = field(
        default_factory=lambda: [s.value for s in RefinementStrategy]
    )
    refiner_kind: str | None = None  # None: each detector refines itself
    splits: int = 5
    seeds: list[int] | None = None
    master_seed: int = 0
    n_seeds: int = 5
    k: int = 5
    nlist: int | None = None
    nprobe: int | None = None
    out_dir: str = "results"
    emit_curves: bool = False
    smooth_sigma: float = DEFAULT_SMOOTH_SIGMA

    @classmethod
    def from_json_file(cls, path: str | Path) -> "SweepConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        known = {f for f in cls.__dataclass_fields__}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if "manifest" not in raw or "levels" not in raw:
            raise ConfigError("config needs 'manifest' and 'levels'")
        return cls(**raw)

    def resolved_seeds(self) -> list[int]:
        """The per-run seeds, chosen once and reused across every ratio."""
        if self.seeds is not None:
            return [int(s) for s in self.seeds]
        return [derive_seed(self.master_seed, self.category, i) for i in range(self.n_seeds)]

    def detector_config(self, kind: DetectorKind) -> DetectorConfig:
        return DetectorConfig(
            kind=kind, k=self.k, nlist=self.nlist, nprobe=self.nprobe
        )


# ---------------------------------------------------------------------------
# Data context


@dataclass
class DataContext:
    """Embeddings, manifest records and ground-truth masks for one category."""

    eset: EmbeddingSet
    records: dict[str, SampleRecord]
    masks: dict[str, np.ndarray]
    image_hw: tuple[int, int] | None

    @classmethod
    def load(cls, config: SweepConfig) -> "DataContext":
        eset = load_embedding_set(config.manifest, config.levels, config.level_ids)
        records = {r.id: r for r in load_manifest(config.manifest)}
        masks, image_hw = _load_masks(records, Path(config.manifest).parent)
        return cls(eset=eset, records=records, masks=masks, image_hw=image_hw)

    def indices(self, ids: Sequence[str]) -> np.ndarray:
        pos = {sid: i for i, sid in enumerate(self.eset.sample_ids)}
        try:
            return np.array([pos[sid] for sid in ids], dtype=np.intp)
        except KeyError as exc:
            raise DataError(f"manifest id {exc.args[0]!r} missing from embeddings")

    def labels(self, ids: Sequence[str]) -> list[str]:
        return [self.records[sid].label for sid in ids]

    def mask_or_zero(self, sid: str) -> np.ndarray:
        if sid in self.masks:
            return self.masks[sid]
        assert self.image_hw is not None
        return np.zeros(self.image_hw, dtype=bool)


def _load_masks(
    records: dict[str, SampleRecord], root: Path
) -> tuple[dict[str, np.ndarray], tuple[int, int] | None]:
    masks: dict[str, np.ndarray] = {}
    shape: tuple[int, int] | None = None
    for rec in records.values():
        if rec.mask is None:
            continue
        path = root / rec.mask
        try:
            with Image.open(path) as img:
                arr = np.array(img.convert("L")) > 0
        except OSError as exc:
            raise DataError(f"cannot read mask {path}: {exc}")
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise DataError(
                f"mask {path} has shape {arr.shape}, expected {shape}"
            )
        masks[rec.id] = arr
    return masks, shape


# ---------------------------------------------------------------------------
# Cell evaluation


def evaluate_cell(
    ctx: DataContext,
    plan: PollutionPlan,
    det_cfg: DetectorConfig,
    strategy: RefinementStrategy | None = None,
    refinement_ratio: float = 0.0,
    refiner_kind: DetectorKind | None = None,
    splits: int = 5,
    seed: int = 0,
    smooth_sigma: float = DEFAULT_SMOOTH_SIGMA,
    curve_sink=None,
) -> ReportRow:
    """Fit (optionally after refinement), score validation, compute metrics."""
    t0 = time.perf_counter()
    train = ctx.eset.subset(ctx.indices(plan.polluted_train_ids()))
    row = ReportRow(
        category=plan.category,
        detector=det_cfg.kind.value,
        strategy="none" if strategy is None else strategy.value,
        pollution=plan.pollution_ratio,
        refinement=refinement_ratio,
        seed=seed,
    )

    if strategy is not None:
        ref_cfg = RefinementConfig(
            strategy=strategy,
            refinement_ratio=refinement_ratio,
            refiner_kind=refiner_kind or det_cfg.kind,
            splits=splits,
            seed=seed,
        )
        # refinement stats are reported only when something is removed and
        # injected ground truth exists (paper tables show "-" otherwise)
        removes_any = int(np.floor(refinement_ratio * train.n)) > 0
        truth = plan.injected_ids if (plan.injected_ids and removes_any) else None
        outcome = refine(train, ref_cfg, defective_ids=truth)
        if outcome.prf is not None:
            row.precision, row.recall, row.f1 = outcome.prf
        train = train.subset(outcome.kept_indices)

    det = fit(det_cfg.kind, train, det_cfg)

    val_ids = plan.val_ids
    val = ctx.eset.subset(ctx.indices(val_ids))
    labels = ctx.labels(val_ids)
    want_pixels = (
        det_cfg.kind in PIXEL_CAPABLE
        and ctx.image_hw is not None
        and any(sid in ctx.masks for sid in val_ids)
    )
    maps = score_set(
        det,
        val,
        out_hw=ctx.image_hw if want_pixels else None,
        smooth_sigma=smooth_sigma,
    )
    row.auc = roc_auc(image_scores(maps), labels)
    if want_pixels:
        score_maps = [m.pixel_scores for m in maps]
        gt = [ctx.mask_or_zero(sid) for sid in val_ids]
        iou = iou_curve(score_maps, gt)
        pro = pro_curve(score_maps, gt)
        row.au_iou = iou.area
        row.au_pro = pro.area
        if curve_sink is not None:
            curve_sink(row, "iou", iou)
            curve_sink(row, "pro", pro)
    row.wall_time_s = time.perf_counter() - t0
    return row


# ---------------------------------------------------------------------------
# Sweeps


def _worker_count() -> int:
    raw = os.environ.get("SROC_WORKERS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        raise ConfigError(f"SROC_WORKERS must be an integer, got {raw!r}")


def _run_cells(cells, out_dir: Path | None) -> ExperimentReport:
    """Run independent cell closures, persist partial results on failure."""
    workers = _worker_count()
    results: list[ReportRow] = []
    failures: list[dict] = []

    def run_one(item):
        key, fn = item
        try:
            return key, fn(), None
        except Exception as exc:  # noqa: BLE001 - reported per cell
            return key, None, f"{type(exc).__name__}: {exc}"

    if workers == 1:
        outcomes = map(run_one, cells)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_one, cells))
    for key, row, err in outcomes:
        if err is None:
            results.append(row)
        else:
            logger.error("cell %s failed: %s", key, err)
            failures.append({"cell": key, "error": err})

    report = ExperimentReport(rows=results).sorted()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(out_dir / "report.csv")
        if failures:
            (out_dir / "failures.json").write_text(json.dumps(failures, indent=1))
    if failures:
        raise SweepError(
            f"{len(failures)} of {len(failures) + len(results)} sweep cells "
            f"failed; partial results kept"
        )
    return report


def _curve_sink(out_dir: Path | None, enabled: bool):
    if not enabled or out_dir is None:
        return None
    curve_dir = out_dir / "curves"
    curve_dir.mkdir(parents=True, exist_ok=True)

    def sink(row: ReportRow, name: str, curve) -> None:
        stem = (
            f"{row.category}_{row.detector}_{row.strategy}"
            f"_p{row.pollution:g}_r{row.refinement:g}_s{row.seed}_{name}.csv"
        )
        curve.write_csv(curve_dir / stem)

    return sink


def run_robustness_sweep(
    config: SweepConfig, ctx: DataContext | None = None
) -> ExperimentReport:
    """Fit each detector on increasingly polluted training sets and measure
    validation metrics; no refinement."""
    ctx = ctx or DataContext.load(config)
    out_dir = Path(config.out_dir)
    seeds = config.resolved_seeds()
    sink = _curve_sink(out_dir, config.emit_curves)
    manifest_records = list(ctx.records.values())

    cells = []
    for ratio in config.pollution_ratios:
        for seed in seeds:
            plan = build_pollution_plan(manifest_records, config.category, ratio, seed)
            for det_name in config.detectors:
                kind = DetectorKind.parse(det_name)

                def cell(plan=plan, kind=kind, seed=seed):
                    return evaluate_cell(
                        ctx,
                        plan,
                        config.detector_config(kind),
                        seed=seed,
                        smooth_sigma=config.smooth_sigma,
                        curve_sink=sink,
                    )

                key = f"{config.category}/{kind.value}/none/p{ratio:g}/s{seed}"
                cells.append((key, cell))
    return _run_cells(cells, out_dir)


def run_refinement_sweep(
    config: SweepConfig,
    ctx: DataContext | None = None,
    pollution_ratio: float = 0.2,
) -> ExperimentReport:
    """Fix pollution at 20%, sweep refinement ratios and strategies."""
    ctx = ctx or DataContext.load(config)
    out_dir = Path(config.out_dir)
    seeds = config.resolved_seeds()
    sink = _curve_sink(out_dir, config.emit_curves)
    manifest_records = list(ctx.records.values())
    refiner = (
        None if config.refiner_kind is None else DetectorKind.parse(config.refiner_kind)
    )

    cells = []
    for seed in seeds:
        plan = build_pollution_plan(
            manifest_records, config.category, pollution_ratio, seed
        )
        for ratio in config.refinement_ratios:
            for strat_name in config.strategies:
                strategy = RefinementStrategy.parse(strat_name)
                for det_name in config.detectors:
                    kind = DetectorKind.parse(det_name)

                    def cell(
                        plan=plan, kind=kind, strategy=strategy, ratio=ratio, seed=seed
                    ):
                        return evaluate_cell(
                            ctx,
                            plan,
                            config.detector_config(kind),
                            strategy=strategy,
                            refinement_ratio=ratio,
                            refiner_kind=refiner,
                            splits=config.splits,
                            seed=seed,
                            smooth_sigma=config.smooth_sigma,
                            curve_sink=sink,
                        )

                    key = (
                        f"{config.category}/{kind.value}/{strategy.value}"
                        f"/r{ratio:g}/s{seed}"
                    )
                    cells.append((key, cell))
    return _run_cells(cells, out_dir)


# ---------------------------------------------------------------------------
# Qualitative analyses


@dataclass(frozen=True)
class DistanceSummary:
    """Mean pairwise Euclidean distances, rows/cols ordered
    (healthy, defective); within-class entries with fewer than two members
    are NaN and listed in `undefined`."""

    matrix: np.ndarray
    undefined: tuple[str, ...]

    def to_csv_text(self) -> str:
        lines = [",healthy,defective"]
        for name, vals in zip(("healthy", "defective"), self.matrix):
            cells = ["" if np.isnan(v) else f"{v:.10g}" for v in vals]
            lines.append(",".join([name] + cells))
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_text())


def pairwise_distance_summary(
    embeddings: np.ndarray, labels: Sequence
) -> DistanceSummary:
    """Mean Euclidean distance healthy-healthy, healthy-defective and
    defective-defective, self-pairs excluded."""
    X = np.asarray(embeddings, dtype=np.float64)
    defective = np.asarray(
        [l == "defective" if isinstance(l, str) else bool(l) for l in labels]
    )
    if X.shape[0] != defective.size:
        raise DataError("embeddings and labels disagree in length")
    healthy_x = X[~defective]
    defect_x = X[defective]

    def mean_within(A: np.ndarray) -> float:
        if A.shape[0] < 2:
            return float("nan")
        d = np.sqrt(
            np.maximum(
                ((A[:, None, :] - A[None, :, :]) ** 2).sum(-1), 0.0
            )
        )
        iu = np.triu_indices(A.shape[0], k=1)
        return float(d[iu].mean())

    def mean_across(A: np.ndarray, B: np.ndarray) -> float:
        if A.shape[0] == 0 or B.shape[0] == 0:
            return float("nan")
        d = np.sqrt(
            np.maximum(((A[:, None, :] - B[None, :, :]) ** 2).sum(-1), 0.0)
        )
        return float(d.mean())

    hh = mean_within(healthy_x)
    dd = mean_within(defect_x)
    hd = mean_across(healthy_x, defect_x)
    undefined = tuple(
        name
        for name, v in (
            ("healthy-healthy", hh),
            ("healthy-defective", hd),
            ("defective-defective", dd),
        )
        if np.isnan(v)
    )
    return DistanceSummary(
        matrix=np.array([[hh, hd], [hd, dd]]), undefined=undefined
    )


@dataclass(frozen=True)
class ContourProjection:
    """2-D projection of the healthy-only and polluted Gaussians onto the two
    axes whose variance changed most."""

    axes: tuple[int, int]
    healthy_model: GaussianModel
    polluted_model: GaussianModel
    healthy_points: np.ndarray
    polluted_points: np.ndarray

    def write_csv(self, path: str | Path) -> None:
        a, b = 0, 1  # projected model matrices are already 2x2
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["model", "axis_a", "axis_b", "mean_a", "mean_b", "cov_aa", "cov_ab", "cov_bb"]
            )
            for name, gm in (("healthy", self.healthy_model), ("polluted", self.polluted_model)):
                writer.writerow(
                    [
                        name,
                        self.axes[0],
                        self.axes[1],
                        f"{gm.mean[a]:.10g}",
                        f"{gm.mean[b]:.10g}",
                        f"{gm.covariance[a, a]:.10g}",
                        f"{gm.covariance[a, b]:.10g}",
                        f"{gm.covariance[b, b]:.10g}",
                    ]
                )
            writer.writerow(["set", "coord_a", "coord_b"])
            for name, pts in (
                ("healthy", self.healthy_points),
                ("polluted", self.polluted_points),
            ):
                for p in pts:
                    writer.writerow([name, f"{p[0]:.10g}", f"{p[1]:.10g}"])


def mvg_contour_projection(
    healthy: np.ndarray, polluted: np.ndarray
) -> ContourProjection:
    """Fit Gaussians on healthy-only and polluted embeddings, pick the two
    axes with the greatest absolute variance change, and project everything
    onto them."""
    H = np.asarray(healthy, dtype=np.float64)
    P = np.asarray(polluted, dtype=np.float64)
    if H.ndim != 2 or P.ndim != 2 or H.shape[1] != P.shape[1]:
        raise DataError("healthy and polluted must be N x D with equal D")
    if H.shape[1] < 2:
        raise DataError("need at least 2 dimensions to project contours")
    gm_h = ledoit_wolf(H)
    gm_p = ledoit_wolf(P)
    change = np.abs(np.diag(gm_p.covariance) - np.diag(gm_h.covariance))
    order = np.lexsort((np.arange(change.size), -change))
    axes = (int(order[0]), int(order[1]))
    sel = list(axes)

    def project(gm: GaussianModel) -> GaussianModel:
        cov = gm.covariance[np.ix_(sel, sel)]
        return GaussianModel(
            mean=gm.mean[sel],
            covariance=cov,
            cholesky_factor=np.linalg.cholesky(cov),
            shrinkage_alpha=gm.shrinkage_alpha,
        )

    return ContourProjection(
        axes=axes,
        healthy_model=project(gm_h),
        polluted_model=project(gm_p),
        healthy_points=H[:, sel],
        polluted_points=P[:, sel],
    )
