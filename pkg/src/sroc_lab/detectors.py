"""The four one-class detectors over embedding sets.

Image-level scores follow the original formulations exactly: nearest-neighbor
scores are means of *squared* Euclidean distances, Gaussian scores are
Mahalanobis distances (square roots), and the patch detectors take the max
over spatial locations. Pixel maps are produced at the detector's native patch
grid; rendering to image resolution is bilinear, with Gaussian smoothing
applied only to the rendered map (image scores are never smoothed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .ann import (
    IvfIndex,
    VectorBank,
    default_nlist,
    default_nprobe,
    exact_knn,
    ivf_build,
    ivf_query,
)
from .errors import ConfigError, InsufficientDataError, ShapeMismatchError
from .gaussian import GaussianModel, ledoit_wolf, mahalanobis_distance_batch
from .tensors import (
    AlignedPatchGrid,
    EmbeddingSet,
    FeatureLevel,
    align_and_concat,
    concat_pooled_levels,
    global_average_pool,
)

DEFAULT_K = 5
DEFAULT_SMOOTH_SIGMA = 4.0


class DetectorKind(Enum):
    KNN = "knn"
    MAHALANOBIS = "mahalanobis"
    PADIM = "padim"
    PATCHCORE = "patchcore"

    @classmethod
    def parse(cls, name: str) -> "DetectorKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ConfigError(
                f"unknown detector kind {name!r}; expected one of "
                f"{[k.value for k in cls]}"
            )


@dataclass(frozen=True)
class DetectorConfig:
    """Detector hyperparameters; JSON form {"kind", "k", "nlist", "nprobe"}."""

    kind: DetectorKind
    k: int = DEFAULT_K
    nlist: int | None = None
    nprobe: int | None = None
    seed: int = 0  # coarse quantizer seed for the IVF index

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")

    @classmethod
    def from_dict(cls, raw: dict) -> "DetectorConfig":
        if "kind" not in raw:
            raise ConfigError("detector config needs a 'kind'")
        known = {"kind", "k", "nlist", "nprobe", "seed"}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown detector config keys: {sorted(extra)}")
        return cls(
            kind=DetectorKind.parse(raw["kind"]),
            k=int(raw.get("k", DEFAULT_K)),
            nlist=None if raw.get("nlist") is None else int(raw["nlist"]),
            nprobe=None if raw.get("nprobe") is None else int(raw["nprobe"]),
            seed=int(raw.get("seed", 0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "DetectorConfig":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "k": self.k,
            "nlist": self.nlist,
            "nprobe": self.nprobe,
            "seed": self.seed,
        }


@dataclass
class ScoreMap:
    """Anomaly scores for one sample: a scalar image score, the detector's
    native patch-grid map (when the detector localizes), and optionally that
    map rendered at image resolution."""

    image_score: float
    grid_scores: np.ndarray | None = None
    pixel_scores: np.ndarray | None = None


@dataclass
class _KnnModel:
    pooled_bank: VectorBank
    train_levels: tuple[FeatureLevel, ...]


@dataclass
class _MahalanobisModel:
    level_models: tuple[GaussianModel, ...]


@dataclass
class _PadimModel:
    cell_models: list  # row-major H*W GaussianModels
    grid_hw: tuple[int, int]
    channels: int


@dataclass
class _PatchcoreModel:
    bank: VectorBank
    index: IvfIndex
    grid_hw: tuple[int, int]
    channels: int
    nprobe: int


@dataclass
class FittedDetector:
    kind: DetectorKind
    k_neighbors: int
    n_train: int
    payload: object
    config: DetectorConfig


# ---------------------------------------------------------------------------
# Fitting


def fit(kind: DetectorKind, train: EmbeddingSet, config: DetectorConfig | None = None) -> FittedDetector:
    """Fit a detector of the given kind on a (possibly polluted) training
    embedding set."""
    config = config or DetectorConfig(kind=kind)
    if config.kind != kind:
        config = DetectorConfig(
            kind=kind, k=config.k, nlist=config.nlist, nprobe=config.nprobe,
            seed=config.seed,
        )
    n = train.n
    if n == 0:
        raise InsufficientDataError(f"{kind.name}: empty training set")

    if kind is DetectorKind.KNN:
        if n < config.k:
            raise InsufficientDataError(
                f"KNN: k={config.k} exceeds training size {n}"
            )
        pooled = concat_pooled_levels(train)
        bank = VectorBank(vectors=pooled, payload_ids=train.sample_ids)
        payload = _KnnModel(pooled_bank=bank, train_levels=train.levels)
    elif kind is DetectorKind.MAHALANOBIS:
        if n < 2:
            raise InsufficientDataError(
                f"MAHALANOBIS: needs at least 2 training samples, got {n}"
            )
        payload = _MahalanobisModel(
            level_models=tuple(
                ledoit_wolf(global_average_pool(lvl)) for lvl in train.levels
            )
        )
    elif kind is DetectorKind.PADIM:
        if n < 2:
            raise InsufficientDataError(
                f"PADIM: needs at least 2 training samples per location, got {n}"
            )
        grid = align_and_concat(train)
        h, w, c = grid.height, grid.width, grid.channels
        flat = grid.data.reshape(n, h * w, c)
        payload = _PadimModel(
            cell_models=[ledoit_wolf(flat[:, cell, :]) for cell in range(h * w)],
            grid_hw=(h, w),
            channels=c,
        )
    elif kind is DetectorKind.PATCHCORE:
        grid = align_and_concat(train)
        h, w, c = grid.height, grid.width, grid.channels
        vectors = grid.data.reshape(n * h * w, c).astype(np.float64)
        ids = tuple(
            (sid, i, j)
            for sid in train.sample_ids
            for i in range(h)
            for j in range(w)
        )
        if vectors.shape[0] < config.k:
            raise InsufficientDataError(
                f"PATCHCORE: k={config.k} exceeds bank size {vectors.shape[0]}"
            )
        bank = VectorBank(vectors=vectors, payload_ids=ids)
        nlist = config.nlist or default_nlist(bank.size)
        index = ivf_build(bank, nlist=nlist, seed=config.seed)
        nprobe = config.nprobe or default_nprobe(nlist)
        payload = _PatchcoreModel(
            bank=bank, index=index, grid_hw=(h, w), channels=c, nprobe=nprobe
        )
    else:  # pragma: no cover - exhaustive enum
        raise ConfigError(f"unhandled detector kind {kind}")

    return FittedDetector(
        kind=kind, k_neighbors=config.k, n_train=n, payload=payload, config=config
    )


# ---------------------------------------------------------------------------
# Map rendering


def resize_bilinear(a: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling with half-pixel-centered coordinates (edge
    clamped), matching common image-resize semantics."""
    h, w = a.shape
    out_h, out_w = out_hw
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.intp)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    a = a.astype(np.float64)
    top = a[np.ix_(y0, x0)] * (1 - wx) + a[np.ix_(y0, x1)] * wx
    bot = a[np.ix_(y1, x0)] * (1 - wx) + a[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def render_pixel_map(
    grid: np.ndarray,
    out_hw: tuple[int, int],
    smooth_sigma: float = DEFAULT_SMOOTH_SIGMA,
) -> np.ndarray:
    """Upsample a patch-grid score map to image resolution and smooth it.

    Smoothing is for pixel-level metrics only; image scores are taken from
    the raw grid.
    """
    up = resize_bilinear(grid, out_hw)
    if smooth_sigma > 0:
        up = gaussian_filter(up, sigma=smooth_sigma)
    return up


# ---------------------------------------------------------------------------
# Scoring


def score_knn(
    det: FittedDetector,
    y_pooled: np.ndarray,
    y_levels: Sequence[np.ndarray] | None = None,
    out_hw: tuple[int, int] | None = None,
    smooth_sigma: float = DEFAULT_SMOOTH_SIGMA,
) -> ScoreMap:
    """Image score: mean squared distance to the k nearest pooled training
    vectors. When per-level patch features are supplied, the pixel map is the
    per-patch mean squared distance to the same-position features of the k
    retrieved neighbor images, summed across levels."""
    _expect(det, DetectorKind.KNN)
    model: _KnnModel = det.payload
    if y_pooled.shape != (model.pooled_bank.dim,):
        raise ShapeMismatchError(
            f"pooled query has shape {y_pooled.shape}, bank dim is "
            f"{model.pooled_bank.dim}"
        )
    neighbors = exact_knn(model.pooled_bank, y_pooled, det.k_neighbors)
    image_score = float(np.mean([d for _, d in neighbors]))

    grid = pixel = None
    if y_levels is not None:
        rows = np.array([r for r, _ in neighbors], dtype=np.intp)
        level_maps = []
        for lvl, y_feat in zip(model.train_levels, y_levels):
            if y_feat.shape != lvl.data.shape[1:]:
                raise ShapeMismatchError(
                    f"level {lvl.level_id}: query patches {y_feat.shape} vs "
                    f"train {lvl.data.shape[1:]}"
                )
            ref = lvl.data[rows].astype(np.float64)  # k x H x W x C
            diff = ref - y_feat.astype(np.float64)[None]
            level_maps.append(np.einsum("kijc,kijc->ij", diff, diff) / rows.size)
        fine_hw = (
            max(m.shape[0] for m in level_maps),
            max(m.shape[1] for m in level_maps),
        )
        grid = sum(resize_bilinear(m, fine_hw) for m in level_maps)
        if out_hw is not None:
            pixel = sum(
                resize_bilinear(m, out_hw) for m in level_maps
            )
            if smooth_sigma > 0:
                pixel = gaussian_filter(pixel, sigma=smooth_sigma)
    return ScoreMap(image_score=image_score, grid_scores=grid, pixel_scores=pixel)


def score_mahalanobis(
    det: FittedDetector, y_levels: Sequence[np.ndarray]
) -> ScoreMap:
    """Sum of per-level Mahalanobis distances of the pooled level vectors.
    No pixel map for this detector."""
    _expect(det, DetectorKind.MAHALANOBIS)
    model: _MahalanobisModel = det.payload
    if len(y_levels) != len(model.level_models):
        raise ShapeMismatchError(
            f"{len(y_levels)} query levels for {len(model.level_models)} models"
        )
    total = 0.0
    for gm, y in zip(model.level_models, y_levels):
        total += float(mahalanobis_distance_batch(gm, np.asarray(y)[None])[0])
    return ScoreMap(image_score=total)


def score_padim(
    det: FittedDetector,
    y_grid: np.ndarray,
    out_hw: tuple[int, int] | None = None,
    smooth_sigma: float = DEFAULT_SMOOTH_SIGMA,
) -> ScoreMap:
    """Per-cell Mahalanobis distances on the aligned grid; the image score is
    the maximum over cells."""
    _expect(det, DetectorKind.PADIM)
    model: _PadimModel = det.payload
    h, w = model.grid_hw
    if y_grid.shape != (h, w, model.channels):
        raise ShapeMismatchError(
            f"grid has shape {y_grid.shape}, model expects {(h, w, model.channels)}"
        )
    flat = y_grid.reshape(h * w, model.channels)
    grid = np.array(
        [
            mahalanobis_distance_batch(gm, flat[cell][None])[0]
            for cell, gm in enumerate(model.cell_models)
        ]
    ).reshape(h, w)
    return _patch_score_map(grid, out_hw, smooth_sigma)


def score_patchcore(
    det: FittedDetector,
    y_grid: np.ndarray,
    out_hw: tuple[int, int] | None = None,
    smooth_sigma: float = DEFAULT_SMOOTH_SIGMA,
) -> ScoreMap:
    """Per-patch mean squared distance to the k nearest bank patches (IVF
    search); the image score is the maximum over patches."""
    _expect(det, DetectorKind.PATCHCORE)
    model: _PatchcoreModel = det.payload
    h, w = model.grid_hw
    if y_grid.shape != (h, w, model.channels):
        raise ShapeMismatchError(
            f"grid has shape {y_grid.shape}, model expects {(h, w, model.channels)}"
        )
    flat = y_grid.reshape(h * w, model.channels)
    grid = np.empty(h * w)
    for p in range(h * w):
        hits = ivf_query(
            model.index, model.bank, flat[p], det.k_neighbors, nprobe=model.nprobe
        )
        grid[p] = np.mean([d for _, d in hits])
    return _patch_score_map(grid.reshape(h, w), out_hw, smooth_sigma)


def _patch_score_map(
    grid: np.ndarray, out_hw: tuple[int, int] | None, smooth_sigma: float
) -> ScoreMap:
    pixel = None
    if out_hw is not None:
        pixel = render_pixel_map(grid, out_hw, smooth_sigma)
    return ScoreMap(
        image_score=float(grid.max()), grid_scores=grid, pixel_scores=pixel
    )


def score_set(
    det: FittedDetector,
    test: EmbeddingSet,
    out_hw: tuple[int, int] | None = None,
    smooth_sigma: float = DEFAULT_SMOOTH_SIGMA,
) -> list[ScoreMap]:
    """Score every sample of a test set in manifest order."""
    if test.n == 0:
        return []
    if det.kind is DetectorKind.KNN:
        pooled = test.pooled if test.pooled is not None else concat_pooled_levels(test)
        return [
            score_knn(
                det,
                pooled[i],
                y_levels=[lvl.data[i] for lvl in test.levels],
                out_hw=out_hw,
                smooth_sigma=smooth_sigma,
            )
            for i in range(test.n)
        ]
    if det.kind is DetectorKind.MAHALANOBIS:
        gaps = [global_average_pool(lvl) for lvl in test.levels]
        return [
            score_mahalanobis(det, [g[i] for g in gaps]) for i in range(test.n)
        ]
    grid = align_and_concat(test).data
    if det.kind is DetectorKind.PADIM:
        return [
            score_padim(det, grid[i], out_hw=out_hw, smooth_sigma=smooth_sigma)
            for i in range(test.n)
        ]
    return [
        score_patchcore(det, grid[i], out_hw=out_hw, smooth_sigma=smooth_sigma)
        for i in range(test.n)
    ]


def image_scores(maps: Sequence[ScoreMap]) -> np.ndarray:
    return np.array([m.image_score for m in maps])


def _expect(det: FittedDetector, kind: DetectorKind) -> None:
    if det.kind is not kind:
        raise ConfigError(f"detector is {det.kind.name}, expected {kind.name}")
