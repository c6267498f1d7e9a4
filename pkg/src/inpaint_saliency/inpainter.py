"""Partial-convolution U-Net inpainter, random hole generator and training.

Mask convention throughout: 1 = pixel present, 0 = hole.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg
from .checkpoint import NetworkCheckpoint
from .diffgraph import Tensor
from .errors import ContractError, DimensionError, InputError, NumericalError
from .nn import BatchNorm2d, Conv2d, Module, ModuleList
from .partialconv import PConvLayer, check_binary

log = logging.getLogger(__name__)


class EncoderStage(Module):
    def __init__(self, cin, cout, k, bn, renorm, rng):
        super().__init__()
        self.pconv = PConvLayer(cin, cout, k, stride=2, renorm=renorm, rng=rng)
        if bn:
            self.bn = BatchNorm2d(cout)
        self.use_bn = bn

    def forward(self, x, m):
        x, m = self.pconv(x, m)
        if self.use_bn:
            x = self.bn(x)
        return dg.relu(x), m


class DecoderStage(Module):
    def __init__(self, cin, cout, renorm, rng):
        super().__init__()
        self.pconv = PConvLayer(cin, cout, 3, stride=1, renorm=renorm, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x, m, skip, skip_mask):
        up = dg.nearest_upsample(x, 2)
        up_m = np.repeat(np.repeat(m, 2, axis=2), 2, axis=3)
        h = dg.concat([up, skip], axis=1)
        # one shared mask: a location is present if either branch carries data
        h, new_m = self.pconv(h, np.maximum(up_m, skip_mask))
        return dg.leaky_relu(self.bn(h), 0.2), new_m


class InpainterNet(Module):
    """U-Net of stride-2 partial-conv encoder stages and upsample+concat decoder
    stages, closed by a 1x1 linear output layer."""

    def __init__(self, channels=(16, 32, 64, 64), kernels=None, decoder_out: int = 16,
                 renorm: str = "paper", output: str = "linear", seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        kernels = tuple(kernels) if kernels else (5,) + (3,) * (len(channels) - 1)
        if len(kernels) != len(channels):
            raise ValueError("need one kernel size per encoder stage")
        if output not in ("linear", "sigmoid"):
            raise ValueError(f"output must be 'linear' or 'sigmoid', got {output!r}")
        self.channels, self.kernels = tuple(channels), kernels
        self.decoder_out, self.renorm, self.output = decoder_out, renorm, output
        self.encoder = ModuleList()
        cin = 1
        for i, (c, k) in enumerate(zip(channels, kernels)):
            self.encoder.append(EncoderStage(cin, c, k, bn=i > 0, renorm=renorm, rng=rng))
            cin = c
        skips = (1,) + tuple(channels[:-1])
        outs = tuple(channels[:-1])[::-1] + (decoder_out,)
        self.decoder = ModuleList()
        for skip_c, out_c in zip(skips[::-1], outs):
            self.decoder.append(DecoderStage(cin + skip_c, out_c, renorm, rng))
            cin = out_c
        self.final = Conv2d(cin, 1, 1, rng=rng)

    @property
    def depth(self) -> int:
        return len(self.channels)

    def arch(self) -> dict[str, str]:
        return {"channels": ",".join(map(str, self.channels)),
                "kernels": ",".join(map(str, self.kernels)),
                "decoder_out": str(self.decoder_out), "renorm": self.renorm, "output": self.output}

    def encoder_bns(self) -> list[BatchNorm2d]:
        return [s.bn for s in self.encoder if s.use_bn]

    def forward(self, x, mask: np.ndarray) -> Tensor:
        """Raw network prediction for a hole image x = I * M and its mask M."""
        x = dg.as_tensor(x)
        size = 2 ** self.depth
        if x.shape[2] % size or x.shape[3] % size:
            raise DimensionError(f"inpainter input {x.shape[2:]} must be divisible by {size}")
        skips = [(x, mask)]
        h, m = x, mask
        for stage in self.encoder:
            h, m = stage(h, m)
            skips.append((h, m))
        skips.pop()
        for stage in self.decoder:
            skip, skip_m = skips.pop()
            h, m = stage(h, m, skip, skip_m)
        out = self.final(h)
        return dg.sigmoid(out) if self.output == "sigmoid" else out


def composite(image: np.ndarray, mask: np.ndarray, raw: np.ndarray) -> np.ndarray:
    """Present pixels copied verbatim, holes from the clamped prediction."""
    return np.where(mask > 0, image, np.clip(raw, 0.0, 1.0)).astype(image.dtype)


def inpaint(image, mask, net: InpainterNet, allow_untrained: bool = True) -> np.ndarray:
    """Fill the holes (mask == 0) of image batch [N,1,H,W]."""
    image = np.asarray(dg.as_tensor(image).data)
    mask = np.asarray(mask, dtype=image.dtype)
    if mask.shape != image.shape:
        raise DimensionError(f"mask {mask.shape} does not match image {image.shape}")
    check_binary(mask)
    if not allow_untrained and not getattr(net, "trained", False):
        raise ContractError("inpainter has not been trained (pass allow_untrained=True to override)")
    per_image = mask.reshape(len(mask), -1)
    if np.any(per_image.max(axis=1) == 0):
        raise ContractError("cannot inpaint an image with no present pixels")
    if np.all(mask == 1):
        return image.copy()
    with dg.no_grad():
        raw = net(Tensor(image * mask), mask).data
    return composite(image, mask, raw)


# ------------------------------------------------------------------ holes

@dataclass
class HoleSpec:
    hole_size: int = 8
    max_holes: int = 40
    cluster_probability: float = 0.5

    def __post_init__(self):
        if self.hole_size < 1 or self.max_holes < 1:
            raise ValueError("hole_size and max_holes must be >= 1")


def generate_holes(shape, spec: HoleSpec, rng: np.random.Generator,
                   allowed: np.ndarray | None = None, max_tries: int = 50) -> np.ndarray:
    """Binary [H, W] mask with between 1 and ``max_holes`` square holes.

    With probability ``cluster_probability`` a hole is placed edge-adjacent to an
    earlier one.  ``allowed`` (optional bool [H, W]) restricts holes to blocks
    lying entirely inside it; placements that cannot satisfy it are skipped.
    """
    h, w = shape
    s = spec.hole_size
    if s >= min(h, w):
        raise ValueError(f"hole size {s} must be smaller than the image {shape}")
    mask = np.ones((h, w), np.float32)
    count = int(rng.integers(1, spec.max_holes + 1))
    corners: list[tuple[int, int]] = []
    steps = ((-s, 0), (s, 0), (0, -s), (0, s))
    for _ in range(count):
        for _ in range(max_tries):
            if corners and rng.random() < spec.cluster_probability:
                r0, c0 = corners[rng.integers(len(corners))]
                dr, dc = steps[rng.integers(4)]
                r, c = int(np.clip(r0 + dr, 0, h - s)), int(np.clip(c0 + dc, 0, w - s))
            else:
                r, c = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
            if allowed is None or allowed[r:r + s, c:c + s].all():
                mask[r:r + s, c:c + s] = 0
                corners.append((r, c))
                break
    return mask


# ------------------------------------------------------------------ training

@dataclass
class LossWeights:
    hole: float = 6.0
    valid: float = 1.0
    # features of the small classifier are far larger than those the usual
    # 0.05 / 120 weights were tuned for; those values wash out the L1 terms
    perceptual: float = 0.0005
    style: float = 1.2
    tv: float = 0.1


@dataclass
class InpainterTrainConfig:
    phase1_epochs: int = 16
    phase2_epochs: int = 4
    lr1: float = 1e-3
    lr2: float = 1e-4
    batch_size: int = 8
    holes: HoleSpec = field(default_factory=HoleSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    feature_stages: int = 3
    seed: int = 0
    hole_seed: int = -1          # shuffling and hole draws; -1 reuses ``seed``
    channels: tuple = (16, 32, 64, 64)
    # same function class as "paper", but trains about 3x faster (no k*k weight inflation)
    renorm: str = "window-ratio"
    output: str = "linear"


def _l1(a, b):
    return dg.mean(dg.tabs(a - b))


def inpainting_loss(raw: Tensor, image: np.ndarray, mask: np.ndarray, weights: LossWeights,
                    features=None, return_parts: bool = False):
    """Weighted sum of hole L1, valid L1, perceptual, style and TV terms.

    ``features`` maps an image tensor to a list of feature tensors (a frozen
    extractor); without it the perceptual and style terms are skipped.
    """
    target = Tensor(image)
    hole = Tensor(1.0 - mask)
    valid = Tensor(mask)
    parts = {
        "hole": _l1(raw * hole, target * hole),
        "valid": _l1(raw * valid, target * valid),
    }
    comp = raw * hole + target * valid
    if features is not None and (weights.perceptual or weights.style):
        with dg.no_grad():
            f_gt = [f.data for f in features(target)]
        f_out, f_comp = features(raw), features(comp)
        perc, style = 0.0, 0.0
        for fo, fc, fg in zip(f_out, f_comp, f_gt):
            perc = perc + _l1(fo, Tensor(fg)) + _l1(fc, Tensor(fg))
            g_gt = Tensor(dg.gram(Tensor(fg)).data)
            style = style + _l1(dg.gram(fo), g_gt) + _l1(dg.gram(fc), g_gt)
        parts["perceptual"], parts["style"] = perc, style
    parts["tv"] = _l1(comp[:, :, :, 1:], comp[:, :, :, :-1]) + _l1(comp[:, :, 1:, :], comp[:, :, :-1, :])
    total = 0.0
    for name, term in parts.items():
        total = total + getattr(weights, name) * term
    return (total, parts) if return_parts else total


def to_checkpoint(net: InpainterNet, log_rows=()) -> NetworkCheckpoint:
    return NetworkCheckpoint("inpainter", net.arch(), net.state_dict(), list(log_rows))


def from_checkpoint(ckpt: NetworkCheckpoint) -> InpainterNet:
    if ckpt.kind != "inpainter":
        raise InputError(f"expected an inpainter checkpoint, got {ckpt.kind!r}")
    a = ckpt.arch
    net = InpainterNet(tuple(int(c) for c in a["channels"].split(",")),
                       tuple(int(k) for k in a["kernels"].split(",")),
                       int(a["decoder_out"]), a["renorm"], a["output"])
    net.load_state_dict(ckpt.state)
    net.trained = True
    return net.eval()


def _hole_batch(n, shape, spec, rng, organs=None):
    masks = np.empty((n, 1) + tuple(shape), np.float32)
    for i in range(n):
        masks[i, 0] = generate_holes(shape, spec, rng)
    return masks


def train_inpainter(samples, config: InpainterTrainConfig | None = None,
                    feature_net=None) -> NetworkCheckpoint:
    """Two-phase training on healthy images.

    Phase 1 trains everything with batch statistics at ``lr1``; phase 2 freezes
    the encoder batch norms (running statistics and affine terms) and continues
    at ``lr2``.  ``feature_net`` (a trained classifier) supplies the frozen
    features for the perceptual and style terms.
    """
    cfg = config or InpainterTrainConfig()
    if not samples:
        raise InputError("inpainter training needs at least one sample")
    if any(s.y for s in samples):
        raise InputError("inpainter trains on healthy samples only")
    images = np.concatenate([s.image for s in samples]).astype(np.float32)
    rng = np.random.default_rng(cfg.seed if cfg.hole_seed < 0 else cfg.hole_seed)
    net = InpainterNet(cfg.channels, renorm=cfg.renorm, output=cfg.output, seed=cfg.seed)
    features = None
    if feature_net is not None:
        feature_net.eval()
        for p in feature_net.parameters():
            p.requires_grad = False

        def features(t):
            return feature_net.features(t, cfg.feature_stages)

    rows = []
    last_good = net.state_dict()
    epoch = 0
    for phase, epochs, lr in ((1, cfg.phase1_epochs, cfg.lr1), (2, cfg.phase2_epochs, cfg.lr2)):
        if phase == 2:
            for bn in net.encoder_bns():
                bn.freeze()
        rows.append({"epoch": epoch, "phase": phase, "loss": "", "val_loss": "",
                     "note": f"phase {phase} start lr={lr:g}"})
        opt = dg.Adam([p for p in net.parameters() if p.requires_grad], lr=lr)
        for _ in range(epochs):
            epoch += 1
            net.train()
            perm = rng.permutation(len(images))
            losses, parts_sum = [], {}
            for i in range(0, len(perm), cfg.batch_size):
                x = images[perm[i:i + cfg.batch_size]]
                m = _hole_batch(len(x), x.shape[2:], cfg.holes, rng)
                opt.zero_grad()
                try:
                    loss, parts = inpainting_loss(net(Tensor(x * m), m), x, m, cfg.weights,
                                                  features, return_parts=True)
                    value = loss.item()
                    if not np.isfinite(value):
                        raise NumericalError(f"loss {value}")
                except NumericalError as exc:
                    log.error("inpainter diverged at epoch %d (%s); keeping last good state", epoch, exc)
                    net.load_state_dict(last_good)
                    rows.append({"epoch": epoch, "phase": phase, "loss": "", "val_loss": "",
                                 "note": "diverged"})
                    net.trained = True
                    return to_checkpoint(net.eval(), rows)
                dg.backward(loss)
                opt.step()
                losses.append(value)
                for k, v in parts.items():
                    parts_sum[k] = parts_sum.get(k, 0.0) + float(v.item())
            last_good = net.state_dict()
            row = {"epoch": epoch, "phase": phase, "loss": float(np.mean(losses)), "val_loss": ""}
            row.update({k: v / len(losses) for k, v in parts_sum.items()})
            rows.append(row)
            log.info("inpainter epoch %d (phase %d) loss %.4f", epoch, phase, row["loss"])
    net.trained = True
    return to_checkpoint(net.eval(), rows)


# ------------------------------------------------------------------ validation

@dataclass
class RocTriple:
    original: float
    healthy_inpainted: float
    lesion_inpainted: float
    healthy_runs: list = field(default_factory=list)
    lesion_runs: list = field(default_factory=list)


def validate_inpainter_roc(classifier, inpainter: InpainterNet, samples, runs: int = 10,
                           rng: np.random.Generator | None = None,
                           holes: HoleSpec | None = None) -> RocTriple:
    """Classifier AUC on original images, after inpainting random holes in
    healthy tissue, and after inpainting the lesions of positives.

    Healthy holes are restricted to organ pixels outside any lesion.  In the
    lesion condition positives get their ground-truth lesion masks as holes
    and negatives get random healthy holes, so only mass tissue is replaced.
    """
    from .classifier import predict
    from .metrics import roc_auc

    rng = rng or np.random.default_rng(0)
    holes = holes or HoleSpec()
    if any(s.y and not s.lesions for s in samples):
        raise InputError("positive samples need ground-truth lesion masks")
    images = np.concatenate([s.image for s in samples]).astype(np.float32)
    labels = np.array([s.y for s in samples])
    original = roc_auc(predict(images, classifier), labels)
    shape = images.shape[2:]

    def healthy_mask(s):
        allowed = s.organ & ~s.lesion_union
        return generate_holes(shape, holes, rng, allowed=allowed)

    healthy_runs, lesion_runs = [], []
    for _ in range(runs):
        m_h = np.stack([healthy_mask(s) for s in samples])[:, None]
        m_l = np.stack([(~s.lesion_union).astype(np.float32) if s.y else healthy_mask(s)
                        for s in samples])[:, None]
        healthy_runs.append(roc_auc(predict(inpaint(images, m_h, inpainter), classifier), labels))
        lesion_runs.append(roc_auc(predict(inpaint(images, m_l, inpainter), classifier), labels))
    return RocTriple(original, float(np.mean(healthy_runs)), float(np.mean(lesion_runs)),
                     healthy_runs, lesion_runs)
