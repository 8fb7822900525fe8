"""Dataset manifest: per-sample records with split, health label, defect type
and ground-truth mask path.

On-disk format is a JSON array of objects
``{"id", "split", "label", "defect_type", "mask"}`` where split is
``train``/``val``, label is ``healthy``/``defective``, and ``defect_type`` /
``mask`` are null for healthy samples.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import DataError

SPLITS = ("train", "val")
LABELS = ("healthy", "defective")


@dataclass(frozen=True)
class SampleRecord:
    id: str
    split: str
    label: str = "healthy"
    defect_type: str | None = None
    mask: str | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"sample {self.id!r}: bad split {self.split!r}")
        if self.label not in LABELS:
            raise DataError(f"sample {self.id!r}: bad label {self.label!r}")


def load_manifest(path: str | Path) -> list[SampleRecord]:
    """Read and validate a manifest file. Sample order is file order."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise DataError(f"{path}: manifest must be a JSON array")
    records = []
    seen = set()
    for i, row in enumerate(raw):
        if not isinstance(row, dict) or "id" not in row:
            raise DataError(f"{path}: row {i} is not an object with an 'id'")
        rec = SampleRecord(
            id=str(row["id"]),
            split=row.get("split", "train"),
            label=row.get("label", "healthy"),
            defect_type=row.get("defect_type"),
            mask=row.get("mask"),
        )
        if rec.id in seen:
            raise DataError(f"{path}: duplicate sample id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
    return records


def save_manifest(records: list[SampleRecord], path: str | Path) -> None:
    rows = [asdict(r) for r in records]
    Path(path).write_text(json.dumps(rows, indent=1) + "\n")
