"""Evaluation metrics: image-level ROC AUC, pixel-level AU-IoU and AU-PRO
capped at 30% false positive rate, and refinement precision/recall/F1.

The capped curves sweep thresholds over the distinct pooled pixel scores
(prediction = score >= threshold). The empty prediction is not an operating
point: below the first achievable point the curve extends at constant value.
An interpolated point is inserted exactly at the cap, the curve is integrated
by trapezoid over [0, cap], and the area is divided by the cap so an ideal
detector scores 1.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError

FPR_CAP = 0.3
_EIGHT_CONN = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class RocCurve:
    """Tie-grouped ROC curve; fpr/tpr have one leading (0,0) anchor so their
    length is len(thresholds) + 1."""

    thresholds: np.ndarray  # descending
    fpr: np.ndarray
    tpr: np.ndarray

    @property
    def auc(self) -> float:
        return float(np.trapezoid(self.tpr, self.fpr))


@dataclass(frozen=True)
class CappedCurve:
    """Metric-vs-FPR curve truncated at fpr_cap; the last point sits exactly
    at the cap (interpolated)."""

    fpr_cap: float
    fpr: np.ndarray
    value: np.ndarray

    @property
    def area(self) -> float:
        """Trapezoidal area over [0, cap], normalized by the cap."""
        return float(np.trapezoid(self.value, self.fpr) / self.fpr_cap)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fpr", "value"])
            for f, v in zip(self.fpr, self.value):
                writer.writerow([f"{f:.10g}", f"{v:.10g}"])


@dataclass(frozen=True)
class GroundTruthRegions:
    """Connected anomalous components of one mask, as (row, col) coord arrays."""

    components: tuple[np.ndarray, ...]

    @property
    def count(self) -> int:
        return len(self.components)


class PrecisionRecallF1(NamedTuple):
    precision: float
    recall: float
    f1: float


def _as_binary_labels(labels: Sequence) -> np.ndarray:
    """Accepts 'healthy'/'defective' strings or 0/1-ish values; defective is
    the positive class."""
    arr = np.asarray(labels)
    if arr.dtype.kind in "US":
        ok = np.isin(arr, ("healthy", "defective"))
        if not ok.all():
            bad = arr[~ok][0]
            raise DataError(f"unknown label {bad!r}")
        return arr == "defective"
    return arr.astype(bool)


# ---------------------------------------------------------------------------
# ROC


def roc_curve(scores: Sequence[float], labels: Sequence) -> RocCurve:
    """ROC with equal scores grouped into single threshold steps."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary_labels(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError("scores and labels must be 1-D and the same length")
    pos = int(y.sum())
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise DataError("ROC needs both classes present")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = np.cumsum(y_sorted)[ends]
    fp = np.cumsum(~y_sorted)[ends]
    return RocCurve(
        thresholds=s_sorted[ends],
        fpr=np.r_[0.0, fp / neg],
        tpr=np.r_[0.0, tp / pos],
    )


def roc_auc(scores: Sequence[float], labels: Sequence) -> float:
    """Trapezoidal area under the tie-grouped ROC; equals the Mann-Whitney
    statistic with half credit for ties."""
    return roc_curve(scores, labels).auc


# ---------------------------------------------------------------------------
# Connected components


def connected_components(mask: np.ndarray) -> GroundTruthRegions:
    """8-connected components of a binary mask."""
    mask = np.asarray(mask).astype(bool)
    labeled, count = ndimage.label(mask, structure=_EIGHT_CONN)
    comps = tuple(
        np.argwhere(labeled == idx) for idx in range(1, count + 1)
    )
    return GroundTruthRegions(components=comps)


# ---------------------------------------------------------------------------
# Capped pixel metrics


def _check_pixel_inputs(pixel_scores, masks) -> tuple[np.ndarray, np.ndarray]:
    if len(pixel_scores) != len(masks) or len(masks) == 0:
        raise DataError("need equally many score maps and masks, at least one")
    flat_scores, flat_masks = [], []
    for i, (sm, gt) in enumerate(zip(pixel_scores, masks)):
        sm = np.asarray(sm, dtype=np.float64)
        gt = np.asarray(gt).astype(bool)
        if sm.shape != gt.shape:
            raise DataError(
                f"image {i}: score map {sm.shape} vs mask {gt.shape}"
            )
        flat_scores.append(sm.ravel())
        flat_masks.append(gt.ravel())
    s = np.concatenate(flat_scores)
    g = np.concatenate(flat_masks)
    if not g.any():
        raise DataError("no defective pixels in any mask")
    if g.all():
        raise DataError("no healthy pixels; FPR is undefined")
    return s, g


def _sweep_groups(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Descending stable order and the inclusive end index of each distinct
    score group."""
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    return order, ends


def _capped_curve(fpr: np.ndarray, value: np.ndarray, cap: float) -> CappedCurve:
    """Assemble a CappedCurve from sweep points (fpr nondecreasing)."""
    if fpr[0] > 0.0:
        fpr = np.r_[0.0, fpr]
        value = np.r_[value[0], value]
    j = int(np.searchsorted(fpr, cap, side="left"))
    if j >= fpr.size:
        # sweep never reaches the cap; extend the last value
        fpr = np.r_[fpr, cap]
        value = np.r_[value, value[-1]]
        j = fpr.size - 1
    if fpr[j] == cap:
        keep_f, keep_v = fpr[: j + 1], value[: j + 1]
    else:
        frac = (cap - fpr[j - 1]) / (fpr[j] - fpr[j - 1])
        v_cap = value[j - 1] + frac * (value[j] - value[j - 1])
        keep_f = np.r_[fpr[:j], cap]
        keep_v = np.r_[value[:j], v_cap]
    return CappedCurve(fpr_cap=cap, fpr=keep_f, value=keep_v)


def iou_curve(
    pixel_scores: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    cap: float = FPR_CAP,
) -> CappedCurve:
    """Dataset-level IoU of predicted-anomalous pixels against ground truth,
    as a function of the pooled pixel FPR."""
    s, g = _check_pixel_inputs(pixel_scores, masks)
    order, ends = _sweep_groups(s)
    g_sorted = g[order]
    tp = np.cumsum(g_sorted)[ends]
    fp = np.cumsum(~g_sorted)[ends]
    gt_total = int(g.sum())
    neg_total = g.size - gt_total
    iou = tp / (gt_total + fp)
    return _capped_curve(fp / neg_total, iou, cap)


def au_iou(
    pixel_scores: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    cap: float = FPR_CAP,
) -> float:
    return iou_curve(pixel_scores, masks, cap).area


def pro_curve(
    pixel_scores: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    cap: float = FPR_CAP,
) -> CappedCurve:
    """Per-region overlap (mean covered fraction of each ground-truth
    component) against the pooled pixel FPR."""
    s, g = _check_pixel_inputs(pixel_scores, masks)

    # global component index per pixel; -1 outside any component
    comp_of_pixel = []
    inv_sizes = []
    n_comp = 0
    for gt in masks:
        labeled, count = ndimage.label(np.asarray(gt).astype(bool), structure=_EIGHT_CONN)
        flat = labeled.ravel()
        ids = np.where(flat > 0, flat - 1 + n_comp, -1)
        comp_of_pixel.append(ids)
        if count:
            sizes = np.bincount(flat[flat > 0])[1:]
            inv_sizes.extend(1.0 / sizes)
        n_comp += count
    if n_comp == 0:
        raise DataError("no ground-truth regions")
    comp_flat = np.concatenate(comp_of_pixel)
    inv_sizes = np.asarray(inv_sizes)

    order, ends = _sweep_groups(s)
    comp_sorted = comp_flat[order]
    increments = np.where(comp_sorted >= 0, inv_sizes[np.maximum(comp_sorted, 0)], 0.0)
    pro = np.cumsum(increments)[ends] / n_comp
    g_sorted = g[order]
    fp = np.cumsum(~g_sorted)[ends]
    neg_total = int((~g).sum())
    return _capped_curve(fp / neg_total, np.minimum(pro, 1.0), cap)


def au_pro(
    pixel_scores: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    cap: float = FPR_CAP,
) -> float:
    return pro_curve(pixel_scores, masks, cap).area


# ---------------------------------------------------------------------------
# Refinement quality


def refinement_prf(
    removed_ids: Sequence, ground_truth_defective_ids: Sequence
) -> PrecisionRecallF1:
    """Precision/recall/F1 of the removal decision against the known
    defective training ids."""
    removed = set(removed_ids)
    truth = set(ground_truth_defective_ids)
    hits = len(removed & truth)
    if removed:
        precision = hits / len(removed)
    else:
        warnings.warn("empty removal set; precision defined as 0", stacklevel=2)
        precision = 0.0
    if truth:
        recall = hits / len(truth)
    else:
        warnings.warn("no defective samples; recall defined as 0", stacklevel=2)
        recall = 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return PrecisionRecallF1(precision=precision, recall=recall, f1=f1)
