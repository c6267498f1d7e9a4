"""Binary healthy-vs-mass CNN with a global-average-pooling head."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .checkpoint import NetworkCheckpoint
from .diffgraph import Tensor
from .errors import DimensionError, InputError, NumericalError
from .nn import BatchNorm2d, Conv2d, Linear, Module, ModuleList

log = logging.getLogger(__name__)


class Stage(Module):
    """conv3x3 -> BN -> ReLU -> maxpool2."""

    def __init__(self, cin, cout, rng):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return dg.maxpool2d(dg.relu(self.bn(self.conv(x))), 2)


class ClassifierNet(Module):
    has_gap_head = True

    def __init__(self, channels=(8, 16, 32, 64), image_size: int = 64, seed: int = 0,
                 zero_head: bool = False):
        super().__init__()
        rng = np.random.default_rng(seed)
        if image_size // 2 ** len(channels) < 4:
            raise DimensionError(f"{len(channels)} stages leave less than 4x4 features "
                                 f"for a {image_size}px input")
        self.channels = tuple(channels)
        self.image_size = image_size
        self.stages = ModuleList()
        cin = 1
        for c in channels:
            self.stages.append(Stage(cin, c, rng))
            cin = c
        self.head = Linear(cin, 1, rng=rng, zero=zero_head)

    def arch(self) -> dict[str, str]:
        return {"channels": ",".join(map(str, self.channels)), "image_size": str(self.image_size)}

    def _check(self, x):
        x = dg.as_tensor(x)
        if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (self.image_size, self.image_size):
            raise DimensionError(f"classifier expects [N,1,{self.image_size},{self.image_size}], "
                                 f"got {x.shape}")
        return x

    def features(self, x, upto: int | None = None) -> list[Tensor]:
        """Outputs of the first ``upto`` stages (all by default)."""
        x = self._check(x)
        outs = []
        for stage in list(self.stages)[:upto]:
            x = stage(x)
            outs.append(x)
        return outs

    def forward(self, x) -> Tensor:
        """Logits [N, 1]."""
        f = self.features(x)[-1]
        return self.head(dg.mean(f, axis=(2, 3)))

    def probability(self, x) -> Tensor:
        return dg.sigmoid(self.forward(x))


def classify(image, net: ClassifierNet) -> float:
    """p(mass | image) for a single [1,1,H,W] image."""
    with dg.no_grad():
        p = net.probability(dg.as_tensor(image)).data
    if p.shape != (1, 1):
        raise DimensionError(f"classify takes one image, got batch of {p.shape[0]}")
    return float(p[0, 0])


def predict(images: np.ndarray, net: ClassifierNet, batch: int = 64) -> np.ndarray:
    out = []
    with dg.no_grad():
        for i in range(0, len(images), batch):
            out.append(net.probability(Tensor(images[i:i + batch])).data[:, 0])
    return np.concatenate(out)


# ------------------------------------------------------------------ training

@dataclass
class ClassifierTrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    patience: int = 10
    val_fraction: float = 0.15
    augment: bool = True
    seed: int = 0
    channels: tuple = (8, 16, 32, 64)


def augment(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random flips and quarter turns, applied per image."""
    out = np.empty_like(images)
    for i, img in enumerate(images):
        a = img[0]
        if rng.random() < 0.5:
            a = a[:, ::-1]
        if rng.random() < 0.5:
            a = a[::-1, :]
        out[i, 0] = np.rot90(a, int(rng.integers(4)))
    return out


def to_checkpoint(net: ClassifierNet, log_rows=()) -> NetworkCheckpoint:
    return NetworkCheckpoint("classifier", net.arch(), net.state_dict(), list(log_rows))


def from_checkpoint(ckpt: NetworkCheckpoint) -> ClassifierNet:
    if ckpt.kind != "classifier":
        raise InputError(f"expected a classifier checkpoint, got {ckpt.kind!r}")
    channels = tuple(int(c) for c in ckpt.arch["channels"].split(","))
    net = ClassifierNet(channels, int(ckpt.arch["image_size"]))
    net.load_state_dict(ckpt.state)
    return net.eval()


def train_classifier(samples, config: ClassifierTrainConfig | None = None) -> NetworkCheckpoint:
    """Binary cross-entropy training with early stopping on a held-out slice.

    The returned checkpoint holds the weights of the best validation epoch; its
    log has one row per epoch plus a final ``early_stop`` note when triggered.
    """
    cfg = config or ClassifierTrainConfig()
    labels = np.array([s.y for s in samples])
    if len(set(labels.tolist())) < 2:
        raise InputError("classifier training needs both healthy and mass samples")
    images = np.concatenate([s.image for s in samples]).astype(np.float32)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(samples))
    n_val = max(2, int(round(cfg.val_fraction * len(samples))))
    val_idx, tr_idx = order[:n_val], order[n_val:]

    net = ClassifierNet(cfg.channels, images.shape[-1], seed=cfg.seed)
    opt = dg.Adam(net.parameters(), lr=cfg.lr)
    best, best_state, best_epoch = np.inf, net.state_dict(), 0
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        perm = rng.permutation(tr_idx)
        losses = []
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue
            x = augment(images[idx], rng) if cfg.augment else images[idx]
            opt.zero_grad()
            loss = dg.bce_with_logits(net(Tensor(x)), labels[idx])
            dg.backward(loss)
            opt.step()
            losses.append(loss.item())
        net.eval()
        with dg.no_grad():
            val_loss = dg.bce_with_logits(net(Tensor(images[val_idx])), labels[val_idx]).item()
        if not np.isfinite(val_loss):
            raise NumericalError(f"classifier validation loss became {val_loss} at epoch {epoch}")
        rows.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_loss": val_loss})
        log.info("classifier epoch %d loss %.4f val_loss %.4f", epoch, rows[-1]["loss"], val_loss)
        if val_loss < best:
            best, best_state, best_epoch = val_loss, net.state_dict(), epoch
        elif epoch - best_epoch >= cfg.patience:
            rows.append({"epoch": epoch, "loss": "", "val_loss": "",
                         "note": f"early_stop best_epoch={best_epoch}"})
            break
    net.load_state_dict(best_state)
    return to_checkpoint(net.eval(), rows)
