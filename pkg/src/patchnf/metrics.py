"""Evaluation metrics: image-level AUROC, pixel-level AUPRO, confusion counts.

AUROC is the Mann-Whitney statistic (ties count 0.5), computed from midranks.
AUPRO follows the per-region-overlap methodology: ground-truth defect regions
are 8-connected components; at each threshold the mean per-region recall is
paired with the global false-positive rate on defect-free pixels, and the
resulting curve is integrated up to an FPR cap (default 0.3) and normalized.

Curve convention: operating points are taken at every distinct threshold
value (descending); between observed FPRs the curve is linear, and below the
smallest observed FPR it extends as a constant. The exhaustive oracle in the
test suite shares this definition but rebuilds every point by brute force.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import DataError

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending
    fpr: np.ndarray
    tpr: np.ndarray
    auroc: float


@dataclass
class ProCurve:
    fpr: np.ndarray
    pro: np.ndarray  # mean per-region overlap at each fpr
    fpr_limit: float
    aupro: float


def _check_binary_labels(labels: np.ndarray):
    classes = np.unique(labels)
    if not np.isin(classes, (0, 1)).all():
        raise DataError(f"labels must be 0/1, got {classes}")
    if classes.size < 2:
        raise DataError("AUROC needs both classes present")


def auroc(scores, labels) -> float:
    """Probability a random anomalous score exceeds a random normal score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise DataError(f"scores {scores.shape} and labels {labels.shape} differ")
    _check_binary_labels(labels)
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    ranks = rankdata(scores)  # midranks: ties share the average rank
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(scores, labels) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary_labels(labels)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    distinct = np.r_[np.nonzero(np.diff(sorted_scores))[0], sorted_scores.size - 1]
    tps = np.cumsum(sorted_labels)[distinct]
    fps = distinct + 1 - tps
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, sorted_scores[distinct]]
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auroc=auroc(scores, labels))


def _pro_points(maps, masks):
    """Exact (fpr, mean-overlap) operating points at every distinct threshold."""
    if len(maps) != len(masks) or not maps:
        raise DataError("need equally many maps and masks, at least one pair")
    region_scores = []  # per region: its pixels' anomaly scores
    negative_scores = []
    for amap, mask in zip(maps, masks):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask)
        if amap.shape != mask.shape:
            raise DataError(f"map {amap.shape} and mask {mask.shape} differ")
        binary = mask > 0
        if not np.isin(np.unique(mask), (0, 1)).all():
            raise DataError("masks must be binary")
        labeled, n_regions = ndimage.label(binary, structure=EIGHT_CONNECTED)
        for r in range(1, n_regions + 1):
            region_scores.append(amap[labeled == r])
        negative_scores.append(amap[~binary])
    if not region_scores:
        raise DataError("AUPRO needs at least one ground-truth defect region")
    negatives = np.sort(np.concatenate(negative_scores))
    n_neg = negatives.size
    n_regions = len(region_scores)

    # Sweep thresholds descending over all distinct pixel values. A pixel
    # fires at threshold v when its score >= v, so per-region overlap and the
    # negative count are searchsorted lookups, vectorized over thresholds.
    all_values = np.unique(np.concatenate([negatives] + region_scores))[::-1]
    pro_pts = np.zeros(all_values.size)
    for rs in region_scores:
        rs_asc = np.sort(rs)
        fired = rs_asc.size - np.searchsorted(rs_asc, all_values, side="left")
        pro_pts += fired / rs_asc.size
    pro_pts /= n_regions
    if n_neg:
        fired_neg = n_neg - np.searchsorted(negatives, all_values, side="left")
        fpr_pts = fired_neg / n_neg
    else:
        fpr_pts = np.ones(all_values.size)
    return fpr_pts, pro_pts


def _integrate_pro(fpr_pts: np.ndarray, pro_pts: np.ndarray, fpr_limit: float):
    """Trapezoid area of the deduplicated curve over [0, fpr_limit], normalized."""
    # FPR and PRO are both non-decreasing along the sweep; keep the last
    # (highest-PRO) point at each distinct FPR.
    last = np.nonzero(np.r_[np.diff(fpr_pts) != 0, True])[0]
    fpr_d = fpr_pts[last]
    pro_d = pro_pts[last]

    # constant extension left of the first observed point
    if fpr_d[0] > 0.0:
        fpr_d = np.r_[0.0, fpr_d]
        pro_d = np.r_[pro_d[0], pro_d]
    if fpr_limit <= fpr_d[0]:
        return pro_d[0], fpr_d, pro_d
    if fpr_limit < fpr_d[-1]:
        pro_at_limit = float(np.interp(fpr_limit, fpr_d, pro_d))
        inside = fpr_d <= fpr_limit
        fpr_c = np.r_[fpr_d[inside], fpr_limit]
        pro_c = np.r_[pro_d[inside], pro_at_limit]
    else:
        fpr_c, pro_c = fpr_d, pro_d
    area = float(np.trapezoid(pro_c, fpr_c)) / fpr_limit
    return area, fpr_c, pro_c


def aupro(maps, masks, fpr_limit: float = 0.3) -> float:
    fpr_pts, pro_pts = _pro_points(maps, masks)
    area, _, _ = _integrate_pro(fpr_pts, pro_pts, fpr_limit)
    return area


def pro_curve(maps, masks, fpr_limit: float = 0.3) -> ProCurve:
    fpr_pts, pro_pts = _pro_points(maps, masks)
    area, fpr_c, pro_c = _integrate_pro(fpr_pts, pro_pts, fpr_limit)
    return ProCurve(fpr=fpr_c, pro=pro_c, fpr_limit=fpr_limit, aupro=area)


def label_regions(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected component labeling of a binary mask."""
    return ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)


def confusion(scores, labels, threshold: float) -> dict:
    """Confusion counts with "normal" as the positive class.

    A sample is predicted abnormal when its score exceeds the threshold.
    tp = normal predicted normal, fp = abnormal predicted normal,
    fn = normal predicted abnormal, tn = abnormal predicted abnormal.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise DataError("confusion needs at least one sample")
    if not np.isfinite(threshold):
        raise DataError(f"threshold must be finite, got {threshold}")
    pred_abnormal = scores > threshold
    actual_abnormal = labels == 1
    tp = int((~actual_abnormal & ~pred_abnormal).sum())
    fp = int((actual_abnormal & ~pred_abnormal).sum())
    fn = int((~actual_abnormal & pred_abnormal).sum())
    tn = int((actual_abnormal & pred_abnormal).sum())
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "tn": tn,
        "accuracy": accuracy,
        "f1_normal": f1,
    }
