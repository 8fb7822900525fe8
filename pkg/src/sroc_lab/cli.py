"""Batch CLI: pollute, fit, score, refine, sweep and analyze subcommands.

Configuration comes from an optional JSON file (--config) with individual
flags overriding it. Exit codes: 0 success, 1 configuration error,
2 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .detectors import DetectorConfig, DetectorKind, fit, image_scores, score_set
from .errors import ConfigError, DataError
from .harness import (
    DataContext,
    ExperimentReport,
    SweepConfig,
    mvg_contour_projection,
    pairwise_distance_summary,
    read_report_csv,
    run_refinement_sweep,
    run_robustness_sweep,
)
from .manifest import load_manifest
from .metrics import roc_auc
from .pollution import PollutionPlan, build_pollution_plan
from .refine import RefinementConfig, RefinementStrategy, refine
from .tensors import concat_pooled_levels, save_array_npy


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); config errors are 1
        raise ConfigError(message)


def _add_embedding_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="manifest JSON path")
    p.add_argument("--levels", nargs="+", help="per-level NPY paths")
    p.add_argument("--plan", help="pollution plan JSON (from `pollute`)")


def _add_detector_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", help="detector kind: knn|mahalanobis|padim|patchcore")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--nlist", type=int, default=None)
    p.add_argument("--nprobe", type=int, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="sroc-lab", description=__doc__)
    parser.add_argument("--config", help="JSON config file", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pollute", help="build a pollution plan")
    p.add_argument("--manifest")
    p.add_argument("--category", default="default")
    p.add_argument("--ratio", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write plan JSON here instead of stdout")

    p = sub.add_parser("fit", help="fit a detector and print a summary")
    _add_embedding_args(p)
    _add_detector_args(p)

    p = sub.add_parser("score", help="fit on train, score validation")
    _add_embedding_args(p)
    _add_detector_args(p)
    p.add_argument("--out", help="output directory", default="scores")
    p.add_argument("--maps", action="store_true", help="also write patch score maps")

    p = sub.add_parser("refine", help="run a refinement strategy on the train set")
    _add_embedding_args(p)
    p.add_argument("--strategy", default="sroc")
    p.add_argument("--ratio", type=float, default=0.2)
    p.add_argument("--refiner", default="mahalanobis")
    p.add_argument("--splits", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write outcome JSON here instead of stdout")

    for name, help_text in (
        ("sweep-robustness", "pollution-ratio grid, no refinement"),
        ("sweep-refinement", "refinement grid at fixed pollution"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--manifest")
        p.add_argument("--levels", nargs="+")
        p.add_argument("--category", default=None)
        p.add_argument("--detectors", nargs="+", default=None)
        p.add_argument("--seeds", nargs="+", type=int, default=None)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--emit-curves", action="store_true")
        if name == "sweep-robustness":
            p.add_argument("--ratios", nargs="+", type=float, default=None)
        else:
            p.add_argument("--ratios", nargs="+", type=float, default=None)
            p.add_argument("--strategies", nargs="+", default=None)
            p.add_argument("--pollution", type=float, default=0.2)
            p.add_argument("--refiner", default=None)

    p = sub.add_parser("analyze-distances", help="mean pairwise embedding distances")
    _add_embedding_args(p)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--out", help="write CSV here instead of stdout")

    p = sub.add_parser("analyze-contours", help="2-D Gaussian contour projection")
    _add_embedding_args(p)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("report", help="merge sweep reports into one CSV")
    p.add_argument("--inputs", nargs="+", required=True, help="report CSV files")
    p.add_argument("--format", choices=("csv",), default="csv")
    p.add_argument("--out", help="write merged CSV here instead of stdout")

    return parser


# ---------------------------------------------------------------------------
# Shared helpers


def _sweep_config(args, defaults: dict | None = None) -> SweepConfig:
    if args.config:
        cfg = SweepConfig.from_json_file(args.config)
    else:
        if not (getattr(args, "manifest", None) and getattr(args, "levels", None)):
            raise ConfigError("need --config or both --manifest and --levels")
        cfg = SweepConfig(manifest=args.manifest, levels=list(args.levels))
    for attr, target in (
        ("manifest", "manifest"),
        ("levels", "levels"),
        ("category", "category"),
        ("detectors", "detectors"),
        ("seeds", "seeds"),
        ("out_dir", "out_dir"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, target, value)
    if getattr(args, "emit_curves", False):
        cfg.emit_curves = True
    if getattr(args, "refiner", None):
        cfg.refiner_kind = args.refiner
    if getattr(args, "strategies", None):
        cfg.strategies = args.strategies
    if getattr(args, "ratios", None) is not None:
        if args.command == "sweep-robustness":
            cfg.pollution_ratios = args.ratios
        else:
            cfg.refinement_ratios = args.ratios
    return cfg


def _load_context(args) -> DataContext:
    manifest = getattr(args, "manifest", None)
    levels = getattr(args, "levels", None)
    if args.config:
        cfg = SweepConfig.from_json_file(args.config)
        manifest = manifest or cfg.manifest
        levels = levels or cfg.levels
    if not manifest or not levels:
        raise ConfigError("need --manifest and --levels (or a --config providing them)")
    return DataContext.load(SweepConfig(manifest=manifest, levels=list(levels)))


def _detector_config(args) -> DetectorConfig:
    raw = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        raw.update(doc.get("detector", {}))
    if getattr(args, "kind", None):
        raw["kind"] = args.kind
    if getattr(args, "k", None) is not None:
        raw["k"] = args.k
    if getattr(args, "nlist", None) is not None:
        raw["nlist"] = args.nlist
    if getattr(args, "nprobe", None) is not None:
        raw["nprobe"] = args.nprobe
    if "kind" not in raw:
        raise ConfigError("need --kind (or a config with a detector section)")
    return DetectorConfig.from_dict(raw)


def _train_val_ids(ctx: DataContext, plan: PollutionPlan | None):
    if plan is not None:
        return plan.polluted_train_ids(), plan.val_ids
    train = tuple(r.id for r in ctx.records.values() if r.split == "train")
    val = tuple(r.id for r in ctx.records.values() if r.split == "val")
    return train, val


def _load_plan(args) -> PollutionPlan | None:
    if getattr(args, "plan", None) is None:
        return None
    return PollutionPlan.from_json(Path(args.plan).read_text())


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# Handlers


def _cmd_pollute(args) -> int:
    if not args.manifest:
        raise ConfigError("pollute needs --manifest")
    records = load_manifest(args.manifest)
    plan = build_pollution_plan(records, args.category, args.ratio, args.seed)
    _emit(plan.to_json(), args.out)
    return 0


def _cmd_fit(args) -> int:
    ctx = _load_context(args)
    det_cfg = _detector_config(args)
    plan = _load_plan(args)
    train_ids, _ = _train_val_ids(ctx, plan)
    t0 = time.perf_counter()
    det = fit(det_cfg.kind, ctx.eset.subset(ctx.indices(train_ids)), det_cfg)
    print(
        json.dumps(
            {
                "kind": det.kind.value,
                "n_train": det.n_train,
                "k": det.k_neighbors,
                "wall_time_s": round(time.perf_counter() - t0, 4),
            }
        )
    )
    return 0


def _cmd_score(args) -> int:
    ctx = _load_context(args)
    det_cfg = _detector_config(args)
    plan = _load_plan(args)
    train_ids, val_ids = _train_val_ids(ctx, plan)
    det = fit(det_cfg.kind, ctx.eset.subset(ctx.indices(train_ids)), det_cfg)
    val = ctx.eset.subset(ctx.indices(val_ids))
    maps = score_set(det, val)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = ctx.labels(val_ids)
    with open(out / "scores.csv", "w") as fh:
        fh.write("id,label,image_score\n")
        for sid, label, m in zip(val_ids, labels, maps):
            fh.write(f"{sid},{label},{m.image_score:.10g}\n")
    if args.maps:
        map_dir = out / "maps"
        map_dir.mkdir(exist_ok=True)
        for sid, m in zip(val_ids, maps):
            if m.grid_scores is not None:
                save_array_npy(m.grid_scores, map_dir / f"{sid}.npy")
    summary = {"n_scored": len(maps), "out": str(out)}
    label_set = set(labels)
    if {"healthy", "defective"} <= label_set:
        summary["auc"] = roc_auc(image_scores(maps), labels)
    print(json.dumps(summary))
    return 0


def _cmd_refine(args) -> int:
    ctx = _load_context(args)
    plan = _load_plan(args)
    train_ids, _ = _train_val_ids(ctx, plan)
    cfg = RefinementConfig(
        strategy=RefinementStrategy.parse(args.strategy),
        refinement_ratio=args.ratio,
        refiner_kind=DetectorKind.parse(args.refiner),
        splits=args.splits,
        seed=args.seed,
    )
    truth = plan.injected_ids if plan is not None and plan.injected_ids else None
    outcome = refine(ctx.eset.subset(ctx.indices(train_ids)), cfg, truth)
    _emit(outcome.to_json(indent=1), args.out)
    return 0


def _cmd_sweep_robustness(args) -> int:
    cfg = _sweep_config(args)
    report = run_robustness_sweep(cfg)
    print(f"{len(report.rows)} rows -> {Path(cfg.out_dir) / 'report.csv'}")
    return 0


def _cmd_sweep_refinement(args) -> int:
    cfg = _sweep_config(args)
    report = run_refinement_sweep(cfg, pollution_ratio=args.pollution)
    print(f"{len(report.rows)} rows -> {Path(cfg.out_dir) / 'report.csv'}")
    return 0


def _cmd_analyze_distances(args) -> int:
    ctx = _load_context(args)
    plan = _load_plan(args)
    if plan is not None:
        ids = plan.polluted_train_ids() if args.split == "train" else plan.val_ids
        injected = set(plan.injected_ids)
        labels = [
            "defective" if sid in injected else ctx.records[sid].label for sid in ids
        ] if args.split == "train" else ctx.labels(ids)
    else:
        ids = tuple(r.id for r in ctx.records.values() if r.split == args.split)
        labels = ctx.labels(ids)
    if not ids:
        raise DataError(f"no samples in split {args.split!r}")
    pooled = concat_pooled_levels(ctx.eset.subset(ctx.indices(ids)))
    summary = pairwise_distance_summary(pooled, labels)
    _emit(summary.to_csv_text(), args.out)
    return 0


def _cmd_analyze_contours(args) -> int:
    ctx = _load_context(args)
    plan = _load_plan(args)
    if plan is None:
        raise ConfigError("analyze-contours needs --plan to know the polluted set")
    train_ids = plan.polluted_train_ids()
    injected = set(plan.injected_ids)
    pooled = concat_pooled_levels(ctx.eset.subset(ctx.indices(train_ids)))
    healthy_rows = np.array([sid not in injected for sid in train_ids])
    projection = mvg_contour_projection(pooled[healthy_rows], pooled)
    projection.write_csv(args.out)
    print(json.dumps({"axes": list(projection.axes), "out": args.out}))
    return 0


def _cmd_report(args) -> int:
    merged = ExperimentReport()
    for path in args.inputs:
        merged.rows.extend(read_report_csv(path).rows)
    # one row per cell: later inputs win on key collisions
    unique = {row.key(): row for row in merged.rows}
    merged = ExperimentReport(rows=[unique[k] for k in sorted(unique)])
    _emit(merged.to_csv_text(), args.out)
    if args.out:
        print(f"{len(merged.rows)} rows -> {args.out}", file=sys.stderr)
    return 0


_HANDLERS = {
    "pollute": _cmd_pollute,
    "fit": _cmd_fit,
    "score": _cmd_score,
    "refine": _cmd_refine,
    "sweep-robustness": _cmd_sweep_robustness,
    "sweep-refinement": _cmd_sweep_refinement,
    "analyze-distances": _cmd_analyze_distances,
    "analyze-contours": _cmd_analyze_contours,
    "report": _cmd_report,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return _HANDLERS[args.command](args)


def main(argv=None) -> int:
    try:
        return cli_main(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
