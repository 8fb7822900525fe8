"""Embedding tensors: NPY file I/O, pooling, and multi-level alignment.

Feature tensors are stored one NPY file per level (little-endian float32,
C order, v1.0 header) next to a JSON manifest. Arithmetic that aggregates
over many values (pooling, later covariance and distances) accumulates in
float64 regardless of the float32 storage.
"""

from __future__ import annotations

import ast
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NonFiniteError, NpyFormatError, ShapeMismatchError
from .manifest import SampleRecord, load_manifest

_NPY_MAGIC = b"\x93NUMPY"
_HEADER_ALIGN = 64


# ---------------------------------------------------------------------------
# NPY serialization


def save_array_npy(data: np.ndarray, path: str | Path) -> None:
    """Write a tensor as NPY v1.0: '<f4' dtype, C order, header padded so the
    data section starts on a 64-byte boundary."""
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.size == 0:
        raise ValueError("refusing to write an empty tensor")
    shape = arr.shape if arr.ndim > 0 else (1,)
    header = "{'descr': '<f4', 'fortran_order': False, 'shape': %s, }" % (
        str(tuple(shape)),
    )
    base = len(_NPY_MAGIC) + 2 + 2  # magic + version + u16 header length
    total = base + len(header) + 1  # +1 for the closing newline
    pad = (-total) % _HEADER_ALIGN
    header = header + " " * pad + "\n"
    with open(path, "wb") as fh:
        fh.write(_NPY_MAGIC)
        fh.write(b"\x01\x00")
        fh.write(struct.pack("<H", len(header)))
        fh.write(header.encode("latin1"))
        fh.write(arr.tobytes(order="C"))


def load_array_npy(path: str | Path) -> np.ndarray:
    """Read an NPY v1.0/v2.0 array. Malformed headers raise NpyFormatError
    with the byte offset of the first defect."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(_NPY_MAGIC)] != _NPY_MAGIC:
        raise NpyFormatError("bad magic string", path=path, offset=0)
    if len(blob) < 10:
        raise NpyFormatError("truncated before version field", path=path, offset=6)
    major, minor = blob[6], blob[7]
    if major == 1:
        (hlen,) = struct.unpack_from("<H", blob, 8)
        hstart = 10
    elif major == 2:
        if len(blob) < 12:
            raise NpyFormatError("truncated header length", path=path, offset=8)
        (hlen,) = struct.unpack_from("<I", blob, 8)
        hstart = 12
    else:
        raise NpyFormatError(f"unsupported version {major}.{minor}", path=path, offset=6)
    hend = hstart + hlen
    if len(blob) < hend:
        raise NpyFormatError("truncated header", path=path, offset=hstart)
    try:
        meta = ast.literal_eval(blob[hstart:hend].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise NpyFormatError(f"unparseable header dict: {exc}", path=path, offset=hstart)
    if not isinstance(meta, dict) or not {"descr", "fortran_order", "shape"} <= set(meta):
        raise NpyFormatError("header missing required keys", path=path, offset=hstart)
    try:
        dtype = np.dtype(meta["descr"])
    except TypeError:
        raise NpyFormatError(f"bad descr {meta['descr']!r}", path=path, offset=hstart)
    shape = tuple(meta["shape"])
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    expected = count * dtype.itemsize
    if len(blob) - hend < expected:
        raise NpyFormatError(
            f"data section has {len(blob) - hend} bytes, expected {expected}",
            path=path,
            offset=hend,
        )
    flat = np.frombuffer(blob, dtype=dtype, count=count, offset=hend)
    order = "F" if meta["fortran_order"] else "C"
    return flat.reshape(shape, order=order).copy()


# ---------------------------------------------------------------------------
# Domain types


@dataclass
class FeatureLevel:
    """One feature level: an N x H x W x C activation tensor."""

    level_id: int
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeMismatchError(
                f"level {self.level_id}: expected N x H x W x C, got shape {self.data.shape}"
            )

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass
class EmbeddingSet:
    """Per-sample feature levels sharing one sample ordering.

    ``pooled`` caches the concatenated GAP matrix; it is filled lazily by
    concat_pooled_levels and must not be mutated afterwards.
    """

    sample_ids: tuple[str, ...]
    levels: tuple[FeatureLevel, ...]
    pooled: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.sample_ids = tuple(self.sample_ids)
        self.levels = tuple(self.levels)
        if not self.levels:
            raise ShapeMismatchError("EmbeddingSet needs at least one level")
        for lvl in self.levels:
            if lvl.n != len(self.sample_ids):
                raise ShapeMismatchError(
                    f"level {lvl.level_id} has N={lvl.n}, manifest has "
                    f"{len(self.sample_ids)} samples"
                )
        if self.pooled is not None and self.pooled.shape[0] != len(self.sample_ids):
            raise ShapeMismatchError("pooled row count disagrees with sample count")

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    def subset(self, indices: Sequence[int]) -> "EmbeddingSet":
        """New EmbeddingSet restricted to the given sample indices, in order."""
        idx = np.asarray(indices, dtype=np.intp)
        return EmbeddingSet(
            sample_ids=tuple(self.sample_ids[i] for i in idx),
            levels=tuple(
                FeatureLevel(lvl.level_id, lvl.data[idx]) for lvl in self.levels
            ),
            pooled=None if self.pooled is None else self.pooled[idx],
        )

    def index_of(self, sample_id: str) -> int:
        try:
            return self.sample_ids.index(sample_id)
        except ValueError:
            raise KeyError(f"unknown sample id {sample_id!r}")


@dataclass
class AlignedPatchGrid:
    """Per-sample patch vectors on the finest level's grid, channels
    concatenated across levels."""

    data: np.ndarray  # N x H x W x C

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


# ---------------------------------------------------------------------------
# Operations


def load_embedding_set(
    manifest_path: str | Path,
    level_files: Sequence[str | Path],
    level_ids: Sequence[int] | None = None,
) -> EmbeddingSet:
    """Load manifest plus one NPY tensor per level into an EmbeddingSet.

    Every level must be N x H x W x C float32 with N equal to the manifest
    row count; non-finite values are rejected with the first offending index.
    """
    records = load_manifest(manifest_path)
    if not level_files:
        raise ShapeMismatchError("need at least one level file")
    if level_ids is None:
        level_ids = list(range(len(level_files)))
    if len(level_ids) != len(level_files):
        raise ShapeMismatchError("level_ids and level_files lengths differ")

    levels = []
    for lid, file in zip(level_ids, level_files):
        arr = load_array_npy(file)
        if arr.ndim != 4:
            raise ShapeMismatchError(
                f"{file}: expected a 4-D N x H x W x C tensor, got shape {arr.shape}"
            )
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if arr.shape[0] != len(records):
            raise ShapeMismatchError(
                f"{file}: N={arr.shape[0]} disagrees with manifest "
                f"({len(records)} samples)"
            )
        if not np.isfinite(arr).all():
            bad = np.argwhere(~np.isfinite(arr))[0]
            raise NonFiniteError(
                f"{file}: non-finite value at index {tuple(int(i) for i in bad)}"
            )
        levels.append(FeatureLevel(level_id=int(lid), data=arr))

    first = levels[0].n
    for lvl in levels[1:]:
        if lvl.n != first:
            raise ShapeMismatchError(
                f"level {lvl.level_id} has N={lvl.n}, level {levels[0].level_id} has N={first}"
            )
    return EmbeddingSet(
        sample_ids=tuple(r.id for r in records), levels=tuple(levels)
    )


def global_average_pool(level: FeatureLevel) -> np.ndarray:
    """Spatial mean of a feature level: N x C, float64 accumulation."""
    return level.data.mean(axis=(1, 2), dtype=np.float64)


def concat_pooled_levels(eset: EmbeddingSet) -> np.ndarray:
    """Concatenate per-level GAP vectors into one N x D matrix (D = sum of
    channel counts) and cache it on the set."""
    pooled = np.concatenate(
        [global_average_pool(lvl) for lvl in eset.levels], axis=1
    )
    eset.pooled = pooled
    return pooled


def _nearest_index_map(src: int, dst: int) -> np.ndarray:
    # floor mapping; reduces to block replication when dst is a multiple of src
    return np.floor(np.arange(dst) * (src / dst)).astype(np.intp)


def align_and_concat(eset: EmbeddingSet) -> AlignedPatchGrid:
    """Upsample every level to the finest grid by nearest-neighbor replication
    and concatenate channels."""
    target_h = max(lvl.height for lvl in eset.levels)
    target_w = max(lvl.width for lvl in eset.levels)
    parts = []
    for lvl in eset.levels:
        data = lvl.data
        if lvl.height != target_h:
            data = data[:, _nearest_index_map(lvl.height, target_h), :, :]
        if lvl.width != target_w:
            data = data[:, :, _nearest_index_map(lvl.width, target_w), :]
        parts.append(data)
    return AlignedPatchGrid(data=np.concatenate(parts, axis=3))
