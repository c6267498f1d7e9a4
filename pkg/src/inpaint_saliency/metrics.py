"""Mask metrics, ROC AUC and the Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist
from scipy.stats import norm, rankdata

from .errors import InputError

_EIGHT = np.ones((3, 3), int)


@dataclass
class Component:
    label: int
    size: int
    centroid: tuple[float, float]   # (row, col)


def connected_components(mask) -> list[Component]:
    """8-connected components of a binary mask, with mean-coordinate centroids."""
    mask = np.asarray(mask, bool)
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return []
    index = np.arange(1, n + 1)
    sizes = ndimage.sum_labels(mask, labels, index)
    cents = ndimage.center_of_mass(mask, labels, index)
    return [Component(int(i), int(s), (float(c[0]), float(c[1])))
            for i, s, c in zip(index, sizes, cents)]


def _as_list(masks):
    if isinstance(masks, np.ndarray) and masks.ndim == 2:
        return [masks]
    return list(masks)


def metric_D(result, gt_masks, direction: str = "result_to_gt") -> float:
    """Mean distance from each result component centroid to the nearest GT
    centroid (``direction="gt_to_result"`` swaps the roles).  NaN if either side
    is empty."""
    res = np.array([c.centroid for c in connected_components(result)]).reshape(-1, 2)
    gt = np.array([c.centroid for m in _as_list(gt_masks) for c in connected_components(m)]).reshape(-1, 2)
    if len(res) == 0 or len(gt) == 0:
        return math.nan
    if direction == "gt_to_result":
        res, gt = gt, res
    elif direction != "result_to_gt":
        raise ValueError(f"unknown direction {direction!r}")
    return float(cdist(res, gt).min(axis=1).mean())


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance between the pixel sets of two masks."""
    pa, pb = np.argwhere(a), np.argwhere(b)
    if len(pa) == 0 or len(pb) == 0:
        return math.nan
    d = cdist(pa, pb)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def metric_H(result, gt_masks) -> float:
    """Hausdorff distance of the result to each GT mass, lower median over masses."""
    values = [hausdorff(result, m) for m in _as_list(gt_masks)]
    values = [v for v in values if not math.isnan(v)]
    return median_aggregate(values) if values else math.nan


def metric_A(result, organ) -> float:
    organ = np.asarray(organ, bool)
    if not organ.any():
        raise InputError("organ mask is empty")
    return float((np.asarray(result, bool) & organ).sum() / organ.sum())


def metric_O(a, b) -> float:
    """Overlap coefficient; NaN if either mask is empty."""
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    smaller = min(a.sum(), b.sum())
    if smaller == 0:
        return math.nan
    return float((a & b).sum() / smaller)


def median_aggregate(values) -> float:
    """Median; for even counts the lower of the two middle values."""
    v = sorted(values)
    if not v:
        raise InputError("median of an empty list")
    return float(v[(len(v) - 1) // 2])


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties get average rank)."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise InputError("roc_auc needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# ------------------------------------------------------------------ Wilcoxon

@dataclass
class WilcoxonResult:
    statistic: float    # W+, sum of ranks of positive differences
    pvalue: float       # two-sided
    n: int              # non-zero differences used
    method: str


def _exact_upper_tail(ranks: np.ndarray, w: float) -> tuple[float, float]:
    """P(W+ >= w) and P(W+ <= w) under the null, counting all 2**n sign patterns.

    Ranks are doubled to integers (ties give half ranks) and the count
    distribution is built by dynamic programming over subset sums.
    """
    ints = np.round(2 * ranks).astype(int)
    counts = np.zeros(ints.sum() + 1)
    counts[0] = 1.0
    for r in ints:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    total = counts.sum()
    target = int(round(2 * w))
    return counts[target:].sum() / total, counts[:target + 1].sum() / total


def wilcoxon_signed_rank(differences, method: str = "auto", exact_max_n: int = 20) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped.  ``method="auto"`` uses the exact null
    distribution up to ``exact_max_n`` non-zero differences and the normal
    approximation (tie and continuity corrected) above it.
    """
    d = np.asarray(differences, float)
    if np.any(~np.isfinite(d)):
        raise InputError("differences must be finite")
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    if n < 5:
        raise InputError(f"need at least 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= exact_max_n else "approx"
    if method == "exact":
        upper, lower = _exact_upper_tail(ranks, w)
        p = min(1.0, 2.0 * min(upper, lower))
    elif method == "approx":
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
        dev = abs(w - mean)
        z = max(dev - 0.5, 0.0) / math.sqrt(var) if var > 0 else 0.0
        p = min(1.0, 2.0 * norm.sf(z))
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(w, float(p), n, method)
