"""On-disk network checkpoints.

Layout of a checkpoint directory::

    manifest.txt        kind/arch/tensor lines, tensors in blob order
    NNN_<name>.f32      little-endian float32 blob per tensor
    training_log.csv    optional per-epoch log

Manifest lines are whitespace separated::

    kind inpainter
    arch channels=16,32,64,64
    tensor enc.0.weight 16,1,5,5 000_enc.0.weight.f32
"""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError


@dataclass
class NetworkCheckpoint:
    kind: str
    arch: dict[str, str]
    state: OrderedDict
    log: list[dict] = field(default_factory=list)

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        lines = [f"kind {self.kind}"]
        lines += [f"arch {k}={v}" for k, v in self.arch.items()]
        for i, (name, arr) in enumerate(self.state.items()):
            blob = f"{i:03d}_{name}.f32"
            shape = ",".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"tensor {name} {shape} {blob}")
            (path / blob).write_bytes(np.asarray(arr, dtype="<f4").tobytes())
        (path / "manifest.txt").write_text("\n".join(lines) + "\n")
        if self.log:
            write_log(path / "training_log.csv", self.log)
        return path

    @classmethod
    def load(cls, path) -> NetworkCheckpoint:
        path = Path(path)
        manifest = path / "manifest.txt"
        if not manifest.is_file():
            raise InputError(f"{manifest}: checkpoint manifest not found")
        kind, arch, state = None, {}, OrderedDict()
        for raw in manifest.read_text().splitlines():
            if not raw.strip():
                continue
            tag, rest = raw.split(" ", 1)
            if tag == "kind":
                kind = rest.strip()
            elif tag == "arch":
                key, value = rest.split("=", 1)
                arch[key] = value
            elif tag == "tensor":
                name, shape, blob = rest.split()
                dims = () if shape == "scalar" else tuple(int(s) for s in shape.split(","))
                data = np.frombuffer((path / blob).read_bytes(), dtype="<f4")
                if data.size != int(np.prod(dims)):
                    raise InputError(f"{path / blob}: {data.size} values, manifest says {dims}")
                state[name] = data.reshape(dims).astype(np.float32)
            else:
                raise InputError(f"{manifest}: unknown line tag {tag!r}")
        if kind is None:
            raise InputError(f"{manifest}: missing kind line")
        log = read_log(path / "training_log.csv") if (path / "training_log.csv").exists() else []
        return cls(kind, arch, state, log)


def write_log(path, rows: list[dict]):
    keys: list[str] = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
