"""Smallest-deletion-region saliency: optimise a relaxed map S so that
replacing the selected pixels with inpainted healthy tissue removes the
classifier's evidence for the target class.

Each step binarises S, inpaints the selected pixels to get a reference image r,
and differentiates the classifier through the composite (1 - S) * I + S * r.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffgraph as dg
from .classifier import classify
from .diffgraph import Tensor
from .errors import ContractError, DomainError, InputError
from .inpainter import inpaint

log = logging.getLogger(__name__)

CLASSIFICATION_TERMS = ("intent", "literal")
REFERENCES = ("binary", "support", "tiled")
OPTIMIZERS = ("sgd", "adam", "shared-adam")


@dataclass
class SaliencyConfig:
    lambda_class: float = 1.0
    lambda_tv: float = 0.1
    lambda_ar: float = 0.1
    lr: float = 2e-3
    steps: int = 100
    threshold: float = 0.5
    grid_spacing: int = 8
    grid_amplitude: float = 0.42
    grid_sigma: float = 2.0
    reinpaint_every: int = 1
    eps_prob: float = 1e-6
    classification_term: str = "intent"
    optimizer: str = "shared-adam"
    reference: str = "tiled"
    reference_threshold: float = 0.1
    reference_tile: int = 8
    grid_combine: str = "max"
    tv_normalize: bool = False
    composite: str = "soft"
    mask_scale: int = 4

    def validate(self):
        for name in ("lambda_class", "lambda_tv", "lambda_ar"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.steps < 1 or self.reinpaint_every < 1:
            raise ValueError("steps and reinpaint_every must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not 0.0 < self.eps_prob < 0.5:
            raise ValueError(f"eps_prob must lie in (0, 0.5), got {self.eps_prob}")
        for name, allowed in (("classification_term", CLASSIFICATION_TERMS),
                              ("reference", REFERENCES), ("optimizer", OPTIMIZERS)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        return self


@dataclass
class SaliencyMap:
    values: np.ndarray          # [H, W] in [0, 1]
    threshold: float = 0.5
    trace: list = field(default_factory=list, repr=False)

    def binary(self) -> np.ndarray:
        return self.values > self.threshold


# ------------------------------------------------------------------ score terms

def clamp_probability(p, eps: float = 1e-6):
    return np.clip(p, eps, 1.0 - eps)


def odds(p, eps: float | None = None):
    """p / (1 - p).  Pass ``eps`` to clamp first; otherwise p must lie strictly
    inside (0, 1)."""
    p = np.asarray(p, dtype=float)
    if eps is not None:
        p = clamp_probability(p, eps)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise DomainError("odds needs probabilities strictly inside (0, 1); clamp first")
    out = p / (1.0 - p)
    return float(out) if out.ndim == 0 else out


def log_odds(p, eps: float | None = None):
    return np.log(odds(p, eps))


def phi(p_inpainted, eps: float | None = None) -> float:
    """-log p(c | inpainted)."""
    p = np.asarray(p_inpainted, dtype=float)
    if eps is not None:
        p = clamp_probability(p, eps)
    if np.any((p <= 0.0) | (p > 1.0)):
        raise DomainError("phi needs a probability in (0, 1]")
    return float(-np.log(p))


def psi(p_original, p_inpainted, eps: float | None = None) -> float:
    """log odds(original) - log odds(inpainted)."""
    return float(log_odds(p_original, eps) - log_odds(p_inpainted, eps))


def tv(S, normalize: bool = True) -> Tensor:
    """Sum of squared differences between horizontally and vertically adjacent
    values, divided by the pixel count when ``normalize``."""
    S = dg.as_tensor(S)
    dh = S[:, 1:] - S[:, :-1]
    dv = S[1:, :] - S[:-1, :]
    total = dg.tsum(dh * dh) + dg.tsum(dv * dv)
    return total / float(S.size) if normalize else total


def ar(S, organ) -> Tensor:
    """Soft Dice overlap between the relaxed map and the organ mask."""
    organ = np.asarray(organ, dtype=float)
    if not organ.any():
        raise InputError("organ mask is empty")
    S = dg.as_tensor(S)
    organ_t = organ.astype(S.data.dtype)
    return 2.0 * dg.tsum(S * organ_t) / (dg.tsum(S) + float(organ.sum()) + 1e-8)


def classification_term(logit_composite: Tensor, logit_original: float, mode: str = "intent") -> Tensor:
    """Score term in logit space, where log p = -softplus(-z) and log odds = z.

    ``intent``: log p(X) + log odds(X) - log odds(I), small when the composite
    looks healthy.  ``literal``: the negation, -(log p(X)) + log odds(I) - log odds(X).
    """
    log_p = dg.log_sigmoid(logit_composite)
    intent = log_p + logit_composite - float(logit_original)
    if mode == "intent":
        return intent
    if mode == "literal":
        return -intent
    raise ValueError(f"unknown classification term {mode!r}")


# ------------------------------------------------------------------ optimisation

def grid_init(organ: np.ndarray, spacing: int = 8, amplitude: float = 0.5,
              sigma: float = 2.0, combine: str = "max") -> np.ndarray:
    """Lattice of Gaussian bumps restricted to the organ, peaking at ``amplitude``.

    ``combine="max"`` keeps separate bumps; ``"sum"`` adds them and rescales, which
    for sigma near spacing / 2 gives a nearly flat field with a small ripple.
    """
    h, w = organ.shape
    centres = np.arange(spacing // 2 - spacing, h + spacing, spacing)
    rr, cc = np.mgrid[0:h, 0:w]
    S = np.zeros((h, w))
    for r in centres:
        for c in np.arange(spacing // 2 - spacing, w + spacing, spacing):
            bump = np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * sigma ** 2))
            S = np.maximum(S, bump) if combine == "max" else S + bump
    return (amplitude * S / S.max() * organ).astype(np.float32)


def _reference(image, holes: np.ndarray, inpainter) -> np.ndarray:
    """Inpainted image for the given hole set; the image itself if there are no
    holes or nothing is left to condition on."""
    if not holes.any():
        return image
    mask = (~holes).astype(image.dtype)[None, None]
    try:
        return inpaint(image, mask, inpainter)
    except ContractError:
        return image


def tiled_reference(image, organ, inpainter, tile: int = 8) -> np.ndarray:
    """Healthy counterfactual for every organ pixel: the organ is inpainted in two
    checkerboard passes of ``tile``-sized holes, each pixel taking the value from
    the pass in which it was a hole."""
    image = np.asarray(image, np.float32)
    h, w = organ.shape
    rr, cc = np.mgrid[0:h, 0:w]
    phase = ((rr // tile) + (cc // tile)) % 2
    out = image.copy()
    for k in (0, 1):
        holes = (phase == k) & organ
        out[0, 0][holes] = _reference(image, holes, inpainter)[0, 0][holes]
    return out


def reference_holes(S: np.ndarray, config: SaliencyConfig) -> np.ndarray:
    if config.reference == "support":
        return S > config.reference_threshold
    return S > config.threshold


def saliency_loss(S, image, classifier, inpainter, organ, config: SaliencyConfig,
                  reference: np.ndarray | None = None, logit_original: float | None = None,
                  return_parts: bool = False):
    """Weighted classification, total-variation and Dice-size terms for map S [H, W]."""
    S = dg.as_tensor(S)
    image = np.asarray(image, dtype=S.data.dtype)
    if reference is None:
        reference = _reference(image, reference_holes(S.data, config), inpainter)
    if logit_original is None:
        with dg.no_grad():
            logit_original = float(classifier(Tensor(image)).data[0, 0])
    weight = S
    if config.composite == "straight-through":
        # forward sees the thresholded map, backward treats it as S
        weight = S - Tensor(S.data) + Tensor((S.data > config.threshold).astype(S.data.dtype))
    S4 = dg.reshape(weight, (1, 1) + S.shape)
    composite = Tensor(image) + S4 * Tensor((reference - image).astype(S.data.dtype))
    logit = dg.reshape(classifier(composite), ())
    parts = {"class": classification_term(logit, logit_original, config.classification_term),
             "tv": tv(S, config.tv_normalize), "ar": ar(S, organ)}
    loss = (config.lambda_class * parts["class"] + config.lambda_tv * parts["tv"]
            + config.lambda_ar * parts["ar"])
    if return_parts:
        return loss, parts, dg.sigmoid(logit).item()
    return loss


def optimize_saliency(image, organ, classifier, inpainter, config: SaliencyConfig | None = None,
                      rng: np.random.Generator | None = None, init: np.ndarray | None = None) -> SaliencyMap:
    """Gradient search for the smallest deletion region of one image [1,1,H,W].

    S is clamped to [0, 1] and zeroed outside the organ after every step.  The
    returned map carries a per-step trace (loss terms and composite score).
    ``rng`` is accepted for interface symmetry; the search itself is deterministic.
    """
    cfg = (config or SaliencyConfig()).validate()
    image = np.asarray(image, dtype=np.float32)
    organ = np.asarray(organ, bool)
    if image.shape[:2] != (1, 1) or image.shape[2:] != organ.shape:
        raise InputError(f"image {image.shape} and organ {organ.shape} do not match")
    if not organ.any():
        raise InputError("organ mask is empty")
    classifier.eval()
    inpainter.eval()
    for p in classifier.parameters():
        p.requires_grad = False
    with dg.no_grad():
        logit_original = float(classifier(Tensor(image)).data[0, 0])
    if logit_original <= 0:
        log.warning("image scores p=%.3f <= 0.5 for the target class; explaining anyway",
                    1 / (1 + math.exp(-logit_original)))
    start = (grid_init(organ, cfg.grid_spacing, cfg.grid_amplitude, cfg.grid_sigma, cfg.grid_combine)
             if init is None else init)
    background = (tiled_reference(image, organ, inpainter, cfg.reference_tile)
                  if cfg.reference == "tiled" else image)
    f = cfg.mask_scale
    h, w = organ.shape
    if h % f or w % f:
        raise InputError(f"mask_scale {f} does not divide the image size {organ.shape}")
    coarse_organ = organ.reshape(h // f, f, w // f, f).any(axis=(1, 3))
    start = np.where(organ, start, 0.0).reshape(h // f, f, w // f, f).mean(axis=(1, 3))
    if init is None and f > 1 and start.max() > 0:
        # block averaging flattens the bumps; restore the configured peak
        start *= cfg.grid_amplitude / start.max()
    P = Tensor(start.astype(np.float32), requires_grad=True)
    organ_f = organ.astype(np.float32)

    def expand(P):
        if f == 1:
            return P * organ_f
        up = dg.nearest_upsample(dg.reshape(P, (1, 1) + P.shape), f)
        return dg.reshape(up, organ.shape) * organ_f

    opt = {"adam": dg.Adam, "shared-adam": dg.SharedAdam, "sgd": dg.SGD}[cfg.optimizer]([P], lr=cfg.lr)
    trace = []
    cached_holes, reference = None, image
    for step in range(cfg.steps):
        S = expand(P)
        holes = reference_holes(S.data, cfg)
        if step % cfg.reinpaint_every == 0 and (cached_holes is None or not np.array_equal(holes, cached_holes)):
            filled = _reference(image, holes, inpainter)
            reference = np.where(holes, filled, background) if cfg.reference == "tiled" else filled
            cached_holes = holes
        opt.zero_grad()
        loss, parts, p = saliency_loss(S, image, classifier, inpainter, organ, cfg,
                                       reference, logit_original, return_parts=True)
        dg.backward(loss)
        opt.step()
        np.clip(P.data, 0.0, 1.0, out=P.data)
        P.data[~coarse_organ] = 0.0
        trace.append({"step": step, "loss": loss.item(), "class": parts["class"].item(),
                      "tv": parts["tv"].item(), "ar": parts["ar"].item(), "p": p})
    with dg.no_grad():
        final = expand(P).data
    return SaliencyMap(final.copy(), cfg.threshold, trace)


def deletion_score(image, smap: SaliencyMap, classifier, inpainter) -> float:
    """p(c | image with the binary map region inpainted)."""
    holes = smap.binary()
    return classify(_reference(np.asarray(image, np.float32), holes, inpainter), classifier)


# ------------------------------------------------------------------ output

TRACE_FIELDS = ("step", "loss", "class", "tv", "ar", "p")


def save_map(smap: SaliencyMap, prefix) -> dict[str, Path]:
    """Write ``<prefix>_map.png`` (16-bit), ``<prefix>_mask.png`` and, if present,
    ``<prefix>_trace.csv``."""
    from .synthdata import write_gray16, write_mask

    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {"map": prefix.with_name(prefix.name + "_map.png"),
             "mask": prefix.with_name(prefix.name + "_mask.png")}
    write_gray16(paths["map"], smap.values)
    write_mask(paths["mask"], smap.binary())
    if smap.trace:
        paths["trace"] = prefix.with_name(prefix.name + "_trace.csv")
        with open(paths["trace"], "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, lineterminator="\n")
            writer.writeheader()
            for row in smap.trace:
                writer.writerow({k: (f"{row[k]:.8g}" if isinstance(row[k], float) else row[k])
                                 for k in TRACE_FIELDS})
    return paths


def config_dict(cfg: SaliencyConfig) -> dict:
    return asdict(cfg)
