"""Shared fixtures.  The benchmark fixture generates the default synthetic
dataset and trains both networks through the command-line entry point
(seed 42).  Set INPAINT_SALIENCY_CACHE to a directory to reuse the result
across pytest sessions."""

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

VERDICTS: dict = {}


def record_verdict(number: int, ok: bool, detail: str):
    VERDICTS[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        ok, detail = VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@dataclass
class Benchmark:
    root: Path
    data: Path
    classifier_dir: Path
    inpainter_dir: Path
    training_seconds: float


def _build(root: Path) -> Benchmark:
    from inpaint_saliency.cli import main

    data, cls_dir, inp_dir = root / "data", root / "classifier", root / "inpainter"
    timing = root / "timing.json"
    if not (data / "manifest.csv").is_file():
        assert main(["gen-data", "--out", str(data), "--force"]) == 0
    if not (timing.is_file() and (cls_dir / "training_log.csv").is_file()
            and (inp_dir / "training_log.csv").is_file()):
        start = time.perf_counter()
        assert main(["train-classifier", "--data", str(data), "--out", str(cls_dir)]) == 0
        assert main(["train-inpainter", "--data", str(data), "--out", str(inp_dir),
                     "--features", str(cls_dir)]) == 0
        timing.write_text(json.dumps({"training_seconds": time.perf_counter() - start}))
    seconds = json.loads(timing.read_text())["training_seconds"]
    return Benchmark(root, data, cls_dir, inp_dir, seconds)


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory) -> Benchmark:
    cache = os.environ.get("INPAINT_SALIENCY_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("benchmark")
    root.mkdir(parents=True, exist_ok=True)
    return _build(root)
