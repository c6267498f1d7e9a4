"""Comparison heatmaps: input-gradient saliency (SAL) and class activation
mapping (CAM), plus percentile thresholding of any heatmap."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import diffgraph as dg
from .diffgraph import Tensor
from .errors import ContractError


@dataclass
class HeatMap:
    values: np.ndarray   # [H, W], non-negative
    method: str          # "sal", "cam" or "ours"


def sal(image, classifier) -> HeatMap:
    """|d p(c|I) / d I| per pixel."""
    classifier.eval()
    x = Tensor(np.asarray(image, np.float32).copy(), requires_grad=True)
    p = dg.reshape(classifier.probability(x), ())
    dg.backward(p)
    return HeatMap(np.abs(x.grad[0, 0]).astype(np.float32), "sal")


def cam(image, classifier, upsample: str = "nearest") -> HeatMap:
    """ReLU of the head-weighted sum of the last feature maps, upsampled to the image."""
    if not getattr(classifier, "has_gap_head", False):
        raise ContractError("CAM needs a classifier with a global-average-pooling dense head")
    classifier.eval()
    image = np.asarray(image, np.float32)
    with dg.no_grad():
        feats = classifier.features(Tensor(image))[-1].data[0]      # [K, h, w]
    weights = classifier.head.weight.data[:, 0]                     # [K]
    return HeatMap(cam_from_features(feats, weights, image.shape[2:], upsample), "cam")


def cam_from_features(features: np.ndarray, weights: np.ndarray, size, upsample: str = "nearest") -> np.ndarray:
    """Rectified weighted sum of feature maps [K, h, w], resized to ``size``."""
    m = np.maximum(np.tensordot(weights, features, axes=1), 0.0)
    fh, fw = size[0] / m.shape[0], size[1] / m.shape[1]
    if upsample == "nearest":
        if fh != int(fh) or fw != int(fw):
            raise ValueError(f"nearest upsampling needs an integer factor, got {fh}x{fw}")
        return np.repeat(np.repeat(m, int(fh), axis=0), int(fw), axis=1).astype(np.float32)
    if upsample == "bilinear":
        return np.maximum(ndimage.zoom(m, (fh, fw), order=1, grid_mode=True, mode="nearest"),
                          0.0).astype(np.float32)
    raise ValueError(f"unknown upsampling {upsample!r}")


def percentile_threshold(values, P: float) -> np.ndarray:
    """Select the ceil((100 - P)% of pixels) largest values; ties at the cut are
    all included.  A constant map yields an empty mask and a warning."""
    if not 0 < P < 100:
        raise ValueError(f"percentile must lie in (0, 100), got {P}")
    v = np.asarray(getattr(values, "values", values), dtype=float)
    flat = np.sort(v.ravel())[::-1]
    if flat[0] == flat[-1]:
        warnings.warn("constant heatmap: percentile threshold is undefined, returning an empty mask",
                      RuntimeWarning, stacklevel=2)
        return np.zeros(v.shape, bool)
    k = math.ceil(round((100 - P) * flat.size, 9) / 100)
    cutoff = flat[k - 1]
    if cutoff == flat[-1]:
        # the cut falls in the tie at the minimum; taking it would select everything
        return v > cutoff
    return v >= cutoff
