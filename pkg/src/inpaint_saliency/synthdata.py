"""Synthetic mammogram-like benchmark: textured half-ellipse "organ" regions,
optional bright lesions with pixel-wise ground truth, and file ingestion for
external data."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InputError

HEALTHY, MASS = "healthy", "mass"
_SPLIT_CODES = {"train": 0, "test": 1}
_LABEL_CODES = {HEALTHY: 0, MASS: 1}


@dataclass
class Sample:
    image: np.ndarray            # [1, 1, H, W] float32 in [0, 1]
    organ: np.ndarray            # [H, W] bool
    lesions: list = field(default_factory=list)  # list of [H, W] bool
    label: str = HEALTHY
    id: str = ""

    @property
    def y(self) -> int:
        return int(self.label == MASS)

    @property
    def lesion_union(self) -> np.ndarray:
        out = np.zeros(self.organ.shape, bool)
        for m in self.lesions:
            out |= m
        return out

    def validate(self):
        if (self.label == MASS) != bool(self.lesions):
            raise InputError(f"{self.id}: label {self.label!r} inconsistent with "
                             f"{len(self.lesions)} lesion mask(s)")
        for m in self.lesions:
            if np.any(m & ~self.organ):
                raise InputError(f"{self.id}: lesion extends outside the organ mask")


@dataclass
class SynthConfig:
    size: int = 64
    texture_sigma: float = 1.5
    texture_amplitude: float = 0.05
    lowfreq_amplitude: float = 0.06
    base_intensity: tuple = (0.42, 0.55)
    lesion_count: tuple = (1, 3)
    lesion_radius: tuple = (4.0, 7.0)
    lesion_contrast: tuple = (0.2, 0.3)
    falloff: float = 2.0


def _quantize(img: np.ndarray) -> np.ndarray:
    # 16-bit grid so a PNG round trip is exact
    return (np.round(np.clip(img, 0, 1) * 65535) / 65535).astype(np.float32)


def _organ_mask(rng, n: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.mgrid[0:n, 0:n].astype(float)
    centre = n / 2 + rng.uniform(-2, 2)
    a = rng.uniform(0.44, 0.49) * n           # vertical semi-axis
    b = rng.uniform(0.8, 0.98) * n            # horizontal reach from the edge
    side = rng.integers(2)
    depth = cols if side == 0 else (n - 1 - cols)
    return ((rows - centre) / a) ** 2 + (depth / b) ** 2 <= 1.0, depth / b


def _texture(rng, n: int, cfg: SynthConfig, depth: np.ndarray) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal((n, n)), cfg.texture_sigma)
    noise /= noise.std() + 1e-12
    coarse = ndimage.gaussian_filter(rng.standard_normal((n, n)), 6.0)
    coarse /= coarse.std() + 1e-12
    base = rng.uniform(*cfg.base_intensity)
    # brighter near the chest wall, fading toward the skin line
    ramp = cfg.lowfreq_amplitude * (1.0 - 2.0 * np.clip(depth, 0, 1))
    return base + ramp + cfg.texture_amplitude * noise + 0.5 * cfg.texture_amplitude * coarse


def _lesion_profile(rng, n: int, cr: float, cc: float, r: float, falloff: float):
    """Soft blob membership in [0, 1] and its half-max support."""
    rows, cols = np.mgrid[0:n, 0:n].astype(float)
    stretch = rng.uniform(1.0, 1.25)
    ang = rng.uniform(0, np.pi)
    dy, dx = rows - cr, cols - cc
    u = (np.cos(ang) * dx + np.sin(ang) * dy) / stretch
    v = (-np.sin(ang) * dx + np.cos(ang) * dy) * stretch
    rho = np.hypot(u, v)
    theta = np.arctan2(v, u)
    harmonics = sum(rng.uniform(0.03, 0.08) * np.cos(h * theta + rng.uniform(0, 2 * np.pi))
                    for h in (3, 5))
    edge = r * (1 + harmonics)
    soft = 1.0 / (1.0 + np.exp(-(edge - rho) / (falloff / 2.0)))
    return soft, soft >= 0.5


def ring(mask: np.ndarray, width: int = 4) -> np.ndarray:
    return ndimage.binary_dilation(mask, iterations=width) & ~mask


def generate_sample(rng: np.random.Generator, label: str = HEALTHY,
                    config: SynthConfig | None = None, sample_id: str = "") -> Sample:
    """Draw one synthetic sample; positives carry 1-3 lesions inside the organ."""
    cfg = config or SynthConfig()
    n = cfg.size
    organ, depth = _organ_mask(rng, n)
    img = _texture(rng, n, cfg, depth)
    lesions = []
    if label == MASS:
        count = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
        inner = ndimage.distance_transform_edt(organ)
        taken = np.zeros((n, n), bool)
        for _ in range(200):
            if len(lesions) == count:
                break
            r = rng.uniform(*cfg.lesion_radius)
            cand = np.argwhere((inner > r * 1.4 + 2) & ~ndimage.binary_dilation(taken, iterations=int(r) + 4))
            if len(cand) == 0:
                continue
            cr, cc = cand[rng.integers(len(cand))]
            soft, gt = _lesion_profile(rng, n, cr, cc, r, cfg.falloff)
            area = int(gt.sum())
            if not 50 <= area <= 350 or np.any(gt & ~organ) or np.any(gt & taken):
                continue
            contrast = rng.uniform(*cfg.lesion_contrast)
            trial = img + contrast * soft
            if trial[gt].mean() - trial[ring(gt) & organ].mean() < 0.1:
                continue
            img = trial
            lesions.append(gt)
            taken |= ring(gt, 2) | gt
        if not lesions:
            raise RuntimeError("could not place a lesion; organ too small for configured radii")
    img = np.where(organ, img, 0.0)
    return Sample(_quantize(img)[None, None], organ, lesions, label, sample_id)


# ------------------------------------------------------------------ splits

@dataclass
class Record:
    id: str
    split: str
    label: str
    seed: int


DEFAULT_COUNTS = (200, 120, 80, 50)


def make_splits(n_train_healthy=200, n_train_mass=120, n_test_healthy=80, n_test_mass=50,
                seed: int = 42) -> list[Record]:
    """Deterministic, disjoint train/test manifest; each record owns a seed."""
    plan = [("train", HEALTHY, n_train_healthy), ("train", MASS, n_train_mass),
            ("test", HEALTHY, n_test_healthy), ("test", MASS, n_test_mass)]
    records = []
    for split, label, count in plan:
        if count < 1:
            raise InputError(f"{split}/{label} count must be >= 1, got {count}")
        for i in range(count):
            ss = np.random.SeedSequence([seed, _SPLIT_CODES[split], _LABEL_CODES[label], i])
            sub_seed = int(ss.generate_state(1, dtype=np.uint32)[0])
            records.append(Record(f"{split}_{label[0]}_{i:04d}", split, label, sub_seed))
    return records


def sample_from_record(rec: Record, config: SynthConfig | None = None) -> Sample:
    return generate_sample(np.random.default_rng(rec.seed), rec.label, config, rec.id)


def build_dataset(records: list[Record], config: SynthConfig | None = None) -> dict[str, list[Sample]]:
    out: dict[str, list[Sample]] = {"train": [], "test": []}
    for rec in records:
        out[rec.split].append(sample_from_record(rec, config))
    return out


# ------------------------------------------------------------------ files

def read_gray(path) -> np.ndarray:
    """Grayscale PNG/PGM as float in [0, 1]; 16-bit files are divided by 65535."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: unreadable image ({exc})") from exc
    if arr.ndim != 2:
        raise InputError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    if arr.dtype == np.uint8 or mode in ("L", "1"):
        return (arr.astype(np.float64) / 255.0).astype(np.float32)
    return (arr.astype(np.float64) / 65535.0).astype(np.float32)


def write_gray16(path, values: np.ndarray):
    arr = np.round(np.clip(values, 0, 1) * 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def write_mask(path, mask: np.ndarray):
    Image.fromarray((np.asarray(mask, bool) * 255).astype(np.uint8)).save(path)


def load_sample(image_path, organ_path, lesion_paths=(), sample_id: str | None = None) -> Sample:
    image = read_gray(image_path)
    organ = read_gray(organ_path) >= 0.5
    if organ.shape != image.shape:
        raise InputError(f"{organ_path}: shape {organ.shape} does not match image {image.shape}")
    lesions = []
    for p in lesion_paths:
        m = read_gray(p) >= 0.5
        if m.shape != image.shape:
            raise InputError(f"{p}: shape {m.shape} does not match image {image.shape}")
        lesions.append(m)
    label = MASS if lesions else HEALTHY
    sample = Sample(image[None, None], organ, lesions, label, sample_id or Path(image_path).stem)
    sample.validate()
    return sample


def save_sample(sample: Sample, directory) -> dict[str, str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"image": directory / f"{sample.id}.png", "organ": directory / f"{sample.id}_organ.png"}
    write_gray16(paths["image"], sample.image[0, 0])
    write_mask(paths["organ"], sample.organ)
    lesion_paths = []
    for i, m in enumerate(sample.lesions):
        p = directory / f"{sample.id}_lesion{i}.png"
        write_mask(p, m)
        lesion_paths.append(p)
    return {"image": paths["image"].name, "organ": paths["organ"].name,
            "lesions": ";".join(p.name for p in lesion_paths)}


MANIFEST_FIELDS = ("id", "split", "label", "seed", "image", "organ", "lesions")


def write_dataset(records: list[Record], directory, config: SynthConfig | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        files = save_sample(sample_from_record(rec, config), directory / rec.split)
        rows.append({"id": rec.id, "split": rec.split, "label": rec.label, "seed": rec.seed,
                     "image": f"{rec.split}/{files['image']}", "organ": f"{rec.split}/{files['organ']}",
                     "lesions": ";".join(f"{rec.split}/{p}" for p in files["lesions"].split(";") if p)})
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def read_manifest(directory) -> list[dict]:
    manifest = Path(directory) / "manifest.csv"
    if not manifest.is_file():
        raise InputError(f"{manifest}: dataset manifest not found")
    with open(manifest, newline="") as fh:
        return list(csv.DictReader(fh))


def load_dataset(directory, split: str | None = None) -> list[Sample]:
    directory = Path(directory)
    out = []
    for row in read_manifest(directory):
        if split and row["split"] != split:
            continue
        lesions = [directory / p for p in row["lesions"].split(";") if p]
        out.append(load_sample(directory / row["image"], directory / row["organ"], lesions, row["id"]))
    return out

