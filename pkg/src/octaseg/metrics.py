"""Segmentation metrics, clinical summary quantities, and the paired t-test."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ShapeError, ValidationError


@dataclass
class MetricsRecord:
    """Overlap metrics plus the clinical quantities for one mask pair.

    Conventions: two empty masks agree perfectly (all overlap metrics 1);
    precision is 1 when nothing was predicted and recall is 1 when there was
    nothing to find.
    """

    dice: float = 0.0
    iou: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    lesion_area_px: int = 0
    vessel_density: float = 0.0
    avascular_area_px: int = 0


def _as_bool_mask(arr: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype == bool:
        return a
    return a > 0.5


def confusion_metrics(pred_mask: np.ndarray, gt_mask: np.ndarray) -> MetricsRecord:
    """Dice, IoU, precision and recall from the pixel confusion counts."""
    pred = _as_bool_mask(pred_mask, "pred_mask")
    gt = _as_bool_mask(gt_mask, "gt_mask")
    if pred.shape != gt.shape:
        raise ShapeError(
            f"mask shapes differ: pred {pred.shape} vs gt {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    dice = 1.0 if tp + fp + fn == 0 else 2.0 * tp / (2 * tp + fp + fn)
    iou = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return MetricsRecord(dice=dice, iou=iou, precision=precision, recall=recall)


def clinical_metrics(region_mask: np.ndarray,
                     vessel_mask: np.ndarray) -> tuple[int, float, int]:
    """Lesion area, vessel density inside the lesion, avascular area.

    Vessel pixels outside the region are ignored via intersection.
    """
    region = _as_bool_mask(region_mask, "region_mask")
    vessel = _as_bool_mask(vessel_mask, "vessel_mask")
    if region.shape != vessel.shape:
        raise ShapeError(
            f"mask shapes differ: region {region.shape} vs vessel {vessel.shape}")
    area = int(np.count_nonzero(region))
    inside = int(np.count_nonzero(vessel & region))
    density = inside / area if area > 0 else 0.0
    return area, density, area - inside


def full_metrics(pred_region: np.ndarray, gt_region: np.ndarray,
                 pred_vessel: np.ndarray) -> MetricsRecord:
    rec = confusion_metrics(pred_region, gt_region)
    area, density, avascular = clinical_metrics(pred_region, pred_vessel)
    rec.lesion_area_px = area
    rec.vessel_density = density
    rec.avascular_area_px = avascular
    return rec


def paired_t_test(pre_values, post_values) -> tuple[float, float]:
    """Two-sided paired t-test; positive t means pre exceeds post.

    Requires n >= 2 pairs and a nonzero difference variance.
    """
    pre = np.asarray(pre_values, dtype=np.float64)
    post = np.asarray(post_values, dtype=np.float64)
    if pre.shape != post.shape or pre.ndim != 1:
        raise ValidationError(
            f"paired samples must be equal-length vectors, got "
            f"{pre.shape} and {post.shape}")
    n = pre.shape[0]
    if n < 2:
        raise ValidationError(f"need at least 2 pairs, got {n}")
    diff = pre - post
    sd = float(diff.std(ddof=1))
    if sd == 0.0:
        raise ValidationError("difference variance is zero; t-test undefined")
    t_stat = float(diff.mean() / (sd / np.sqrt(n)))
    p_value = float(2.0 * stats.t.sf(abs(t_stat), df=n - 1))
    return t_stat, p_value
