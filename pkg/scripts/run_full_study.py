"""Full study driver over exported per-category embeddings.

Expects a root directory laid out as <root>/<category>/{manifest.json,
level*.npy} (the exporter's output). For every category it runs:

  1. the pollution-robustness sweep (ratios 0 to 20%, 5 seeds),
  2. the refinement sweep at 20% pollution (4 strategies, ratios 0 to 80%),
  3. the cross-detector variant (refine with the Gaussian detector, fit each
     detector on the kept samples),
  4. the qualitative analyses (pairwise distances, contour projection).

Results land under <out>/<category>/; merged report at <out>/report.csv.

Usage:
    python scripts/run_full_study.py --embeddings <root> --out results/full \
        [--seeds 0 1 2 3 4] [--quick]
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from sroc_lab.detectors import DetectorKind
from sroc_lab.errors import CategoryExcludedError
from sroc_lab.harness import (
    DataContext,
    ExperimentReport,
    SweepConfig,
    mvg_contour_projection,
    pairwise_distance_summary,
    run_refinement_sweep,
    run_robustness_sweep,
)
from sroc_lab.pollution import build_pollution_plan
from sroc_lab.tensors import concat_pooled_levels


def category_config(cat_dir: Path, out_dir: Path, seeds, quick: bool) -> SweepConfig:
    levels = sorted(str(p) for p in cat_dir.glob("level*.npy"))
    if not levels:
        raise FileNotFoundError(f"{cat_dir}: no level*.npy files")
    return SweepConfig(
        manifest=str(cat_dir / "manifest.json"),
        levels=levels,
        category=cat_dir.name,
        seeds=list(seeds),
        pollution_ratios=[0.0, 0.2] if quick else [0.0, 0.05, 0.1, 0.15, 0.2],
        refinement_ratios=[0.0, 0.2, 0.4] if quick else [i / 10 for i in range(9)],
        out_dir=str(out_dir),
        emit_curves=True,
    )


def run_category(cat_dir: Path, out_root: Path, seeds, quick: bool) -> list[Path]:
    reports = []
    cfg = category_config(cat_dir, out_root / cat_dir.name / "robustness", seeds, quick)
    ctx = DataContext.load(cfg)
    print(f"[{cfg.category}] robustness sweep ...")
    run_robustness_sweep(cfg, ctx=ctx)
    reports.append(Path(cfg.out_dir) / "report.csv")

    cfg = category_config(cat_dir, out_root / cat_dir.name / "refinement", seeds, quick)
    print(f"[{cfg.category}] refinement sweep (self-refining) ...")
    run_refinement_sweep(cfg, ctx=ctx)
    reports.append(Path(cfg.out_dir) / "report.csv")

    cfg = category_config(
        cat_dir, out_root / cat_dir.name / "refinement_gaussian", seeds, quick
    )
    cfg.refiner_kind = DetectorKind.MAHALANOBIS.value
    cfg.strategies = ["sroc"]
    print(f"[{cfg.category}] refinement sweep (gaussian refiner) ...")
    run_refinement_sweep(cfg, ctx=ctx)
    reports.append(Path(cfg.out_dir) / "report.csv")

    analysis_dir = out_root / cat_dir.name
    records = list(ctx.records.values())
    plan = build_pollution_plan(records, cfg.category, 0.2, seeds[0])
    train_ids = plan.polluted_train_ids()
    injected = set(plan.injected_ids)
    pooled = concat_pooled_levels(ctx.eset.subset(ctx.indices(train_ids)))
    labels = ["defective" if sid in injected else "healthy" for sid in train_ids]
    pairwise_distance_summary(pooled, labels).write_csv(analysis_dir / "distances.csv")
    healthy_rows = np.array([sid not in injected for sid in train_ids])
    mvg_contour_projection(pooled[healthy_rows], pooled).write_csv(
        analysis_dir / "contours.csv"
    )
    return reports


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--embeddings", required=True, help="exported embeddings root")
    parser.add_argument("--out", default="results/full")
    parser.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    parser.add_argument("--quick", action="store_true", help="coarse ratio grids")
    args = parser.parse_args(argv)

    root = Path(args.embeddings)
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    all_reports = []
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            all_reports.extend(run_category(cat_dir, out_root, args.seeds, args.quick))
        except CategoryExcludedError as exc:
            print(f"[{cat_dir.name}] excluded: {exc}")

    merged = ExperimentReport()
    from sroc_lab.harness import read_report_csv

    for path in all_reports:
        merged.rows.extend(read_report_csv(path).rows)
    merged = merged.sorted()
    merged.write_csv(out_root / "report.csv")
    print(f"{len(merged.rows)} rows -> {out_root / 'report.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
