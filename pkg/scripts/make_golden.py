"""Regenerate the committed golden report for the CLI end-to-end test.

Runs the small robustness sweep the test replays on the committed synthetic
fixture and freezes the report with the wall-time column stripped. Only
re-run after an intentional scoring/metric change, and re-verify the numbers
against the oracle suites first.
"""

from pathlib import Path
import subprocess
import sys
import tempfile

ROOT = Path(__file__).resolve().parent.parent
FIXTURE = ROOT / "tests" / "fixtures" / "synthcat"
GOLDEN = ROOT / "tests" / "golden" / "robustness_report.csv"

SWEEP_ARGS = [
    "sweep-robustness",
    "--manifest", str(FIXTURE / "manifest.json"),
    "--levels", str(FIXTURE / "level0.npy"), str(FIXTURE / "level1.npy"),
    "--category", "synthcat",
    "--detectors", "knn", "mahalanobis", "padim", "patchcore",
    "--ratios", "0.0", "0.2",
    "--seeds", "0", "1",
]


def strip_wall_time(text: str) -> str:
    lines = [",".join(line.split(",")[:-1]) for line in text.strip().splitlines()]
    return "\n".join(lines) + "\n"


def main():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "sroc_lab.cli", *SWEEP_ARGS, "--out-dir", tmp],
            check=True,
            cwd=ROOT,
        )
        report = (Path(tmp) / "report.csv").read_text()
    GOLDEN.parent.mkdir(parents=True, exist_ok=True)
    GOLDEN.write_text(strip_wall_time(report))
    print(f"golden written: {GOLDEN}")


if __name__ == "__main__":
    main()
