"""Partial convolution: masked cross-correlation renormalised by the number of
valid pixels under the window, with validity propagated to the next layer.

For every output location with window mask count ``n = sum(M) > 0``::

    x' = W . (X * M) * scale(n) + b        scale = 1/n        ("paper")
                                           scale = k*k/n      ("window-ratio")

and ``x' = 0`` where ``n == 0``.  The updated mask is 1 exactly where ``n > 0``.
The mask is one channel shared by all feature channels; zero padding counts
as missing data.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import diffgraph as dg
from .diffgraph import Tensor
from .errors import ContractError, DimensionError
from .nn import Module, he_normal

RENORM_MODES = ("paper", "window-ratio")


def window_counts(mask: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Number of valid mask pixels under each k x k window."""
    mp = np.pad(mask, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else mask
    win = sliding_window_view(mp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho = dg.conv_output_size(mask.shape[2], k, stride, padding)
    wo = dg.conv_output_size(mask.shape[3], k, stride, padding)
    return win[:, :, :ho, :wo].sum(axis=(4, 5))


def check_binary(mask: np.ndarray):
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError("partial convolution mask must be binary (0 = hole, 1 = present)")


def partial_conv2d(x, mask: np.ndarray, weight, bias=None, stride: int = 1, padding: int = 0,
                   renorm: str = "paper"):
    """Apply one partial convolution.

    Args:
        x: features [N, C, H, W].
        mask: binary numpy array [N, 1, H, W]; not differentiated.
        weight: filters [F, C, k, k].
        bias: optional [F]; added only where the window saw valid pixels.

    Returns:
        ``(features, new_mask)`` with ``new_mask`` a float numpy array.
    """
    x, weight = dg.as_tensor(x), dg.as_tensor(weight)
    mask = np.asarray(mask)
    if mask.ndim != 4 or mask.shape[1] != 1 or mask.shape[0] != x.shape[0] \
            or mask.shape[2:] != x.shape[2:]:
        raise DimensionError(f"partial_conv2d: mask {mask.shape} incompatible with input {x.shape}")
    check_binary(mask)
    if renorm not in RENORM_MODES:
        raise ValueError(f"renorm must be one of {RENORM_MODES}, got {renorm!r}")
    k = weight.shape[2]
    mask = mask.astype(x.data.dtype)
    counts = window_counts(mask, k, stride, padding)
    valid = counts > 0
    numer = k * k if renorm == "window-ratio" else 1.0
    scale = np.where(valid, numer / np.maximum(counts, 1), 0.0).astype(x.data.dtype)

    xm = x.data * mask
    raw, cols = dg._conv_forward(xm, weight.data, stride, padding)
    out = raw * scale
    parents = [x, weight]
    if bias is not None:
        bias = dg.as_tensor(bias)
        out = out + bias.data[None, :, None, None] * valid
        parents.append(bias)

    def bw(g):
        gs = g * scale
        dxm, dw = dg._conv_backward(gs, cols, x.shape, weight.data, stride, padding,
                                    x.requires_grad)
        grads = [None if dxm is None else dxm * mask, dw]
        if bias is not None:
            grads.append((g * valid).sum(axis=(0, 2, 3)))
        return grads

    new_mask = valid.astype(x.data.dtype)
    return Tensor._result(out, parents, bw, "partial_conv2d"), new_mask


class PConvLayer(Module):
    """Partial convolution with odd kernel (3, 5 or 7) and 'same'-style padding."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, renorm: str = "paper",
                 rng: np.random.Generator | None = None):
        super().__init__()
        if k not in (3, 5, 7):
            raise ValueError(f"partial conv kernel must be 3, 5 or 7, got {k}")
        rng = rng or np.random.default_rng(0)
        self.k, self.stride, self.padding, self.renorm = k, stride, (k - 1) // 2, renorm
        # 1/n renormalisation shrinks full-window responses by k*k; start the
        # filters scaled up so activations begin at He-like magnitude.
        gain = 2.0 * (k * k) ** 2 if renorm == "paper" else 2.0
        self.weight = he_normal(rng, (cout, cin, k, k), cin * k * k, gain=gain)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def forward(self, x, mask):
        return partial_conv2d(x, mask, self.weight, self.bias, self.stride, self.padding,
                              self.renorm)
