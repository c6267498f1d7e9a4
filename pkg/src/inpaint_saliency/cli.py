"""Command-line entry point: data generation, training, explanation, evaluation.

Exit codes: 0 success, 2 input error, 3 incomplete report, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines, classifier as cls_mod, inpainter as inp_mod, synthdata
from .checkpoint import NetworkCheckpoint
from .config import apply_overrides, format_config, parse_config_file, stream, stream_seed
from .errors import DimensionError, InputError, NumericalError
from .evaluation import EvalConfig, run_evaluation, write_report
from .saliency import SaliencyConfig, deletion_score, optimize_saliency, save_map

log = logging.getLogger("inpaint_saliency")

EXIT_OK, EXIT_INPUT, EXIT_INCOMPLETE, EXIT_NUMERICAL = 0, 2, 3, 4


@dataclasses.dataclass
class RunConfig:
    seed: int = 42
    classifier: cls_mod.ClassifierTrainConfig = dataclasses.field(default_factory=cls_mod.ClassifierTrainConfig)
    inpainter: inp_mod.InpainterTrainConfig = dataclasses.field(default_factory=inp_mod.InpainterTrainConfig)
    saliency: SaliencyConfig = dataclasses.field(default_factory=SaliencyConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    roc_runs: int = 10
    percentile: int = 50


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = apply_overrides(cfg, parse_config_file(args.config))
    if getattr(args, "set", None):
        pairs = {}
        for item in args.set:
            if "=" not in item:
                raise InputError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            pairs[k.strip()] = v.strip()
        cfg = apply_overrides(cfg, pairs)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    log.info("resolved config:\n%s", format_config(cfg))
    return cfg


def _write_resolved(cfg: RunConfig, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.resolved.txt").write_text(format_config(cfg))


def _load_checkpoint(path, kind: str):
    if path is None:
        raise InputError(f"--{kind} checkpoint is required")
    ckpt = NetworkCheckpoint.load(path)
    return cls_mod.from_checkpoint(ckpt) if kind == "classifier" else inp_mod.from_checkpoint(ckpt)


def _training_samples(data_dir) -> list:
    samples = synthdata.load_dataset(data_dir, split="train")
    if not samples:
        raise InputError(f"{data_dir}: no training samples in manifest")
    return samples


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise InputError(f"{out} exists and is not empty (use --force to overwrite)")
    records = synthdata.make_splits(*args.counts, seed=stream_seed(cfg.seed, "data"))
    manifest = synthdata.write_dataset(records, out)
    _write_resolved(cfg, out)
    print(f"wrote {len(records)} samples to {out} ({manifest.name})")
    return EXIT_OK


def cmd_train_classifier(args, cfg: RunConfig) -> int:
    train_cfg = dataclasses.replace(cfg.classifier, seed=stream_seed(cfg.seed, "init"))
    ckpt = cls_mod.train_classifier(_training_samples(args.data), train_cfg)
    path = ckpt.save(args.out)
    _write_resolved(cfg, path)
    print(f"classifier checkpoint written to {path}")
    return EXIT_OK


def cmd_train_inpainter(args, cfg: RunConfig) -> int:
    healthy = [s for s in _training_samples(args.data) if not s.y]
    features = _load_checkpoint(args.features, "classifier") if args.features else None
    train_cfg = dataclasses.replace(cfg.inpainter, seed=stream_seed(cfg.seed, "init"),
                                    hole_seed=stream_seed(cfg.seed, "holes"))
    ckpt = inp_mod.train_inpainter(healthy, train_cfg, feature_net=features)
    path = ckpt.save(args.out)
    _write_resolved(cfg, path)
    print(f"inpainter checkpoint written to {path}")
    return EXIT_OK


def _resolve_image(args):
    """Sample from a dataset id or from an image file (organ from --organ or
    the non-zero pixels)."""
    candidate = Path(args.image)
    if candidate.is_file():
        if args.organ:
            return synthdata.load_sample(candidate, args.organ, sample_id=candidate.stem)
        image = synthdata.read_gray(candidate)
        return synthdata.Sample(image[None, None], image > 0, [], synthdata.HEALTHY, candidate.stem)
    if not args.data:
        raise InputError(f"{args.image}: not a file; pass --data to look it up as a sample id")
    for row in synthdata.read_manifest(args.data):
        if row["id"] == args.image:
            root = Path(args.data)
            lesions = [root / p for p in row["lesions"].split(";") if p]
            return synthdata.load_sample(root / row["image"], root / row["organ"], lesions, row["id"])
    raise InputError(f"{args.image}: no such sample id in {args.data}")


def cmd_explain(args, cfg: RunConfig) -> int:
    sample = _resolve_image(args)
    classifier = _load_checkpoint(args.classifier, "classifier")
    try:
        p_orig = cls_mod.classify(sample.image, classifier)
    except DimensionError as exc:
        raise InputError(f"{args.image}: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prefix = out / f"{sample.id}_{args.method}"
    record = {"id": sample.id, "method": args.method, "p_original": p_orig}
    if args.method == "ours":
        inpainter = _load_checkpoint(args.inpainter, "inpainter")
        smap = optimize_saliency(sample.image, sample.organ, classifier, inpainter, cfg.saliency,
                                 rng=stream(cfg.seed, "eval"))
        files = save_map(smap, prefix)
        record["p_inpainted"] = deletion_score(sample.image, smap, classifier, inpainter)
        record["threshold"] = cfg.saliency.threshold
    else:
        heat = (baselines.cam(sample.image, classifier, cfg.eval.cam_upsample) if args.method == "cam"
                else baselines.sal(sample.image, classifier))
        values = heat.values / heat.values.max() if heat.values.max() > 0 else heat.values
        files = {"map": prefix.with_name(prefix.name + "_map.png"),
                 "mask": prefix.with_name(prefix.name + "_mask.png")}
        synthdata.write_gray16(files["map"], values)
        synthdata.write_mask(files["mask"], baselines.percentile_threshold(heat.values, cfg.percentile))
        record["percentile"] = cfg.percentile
    record["files"] = {k: v.name for k, v in files.items()}
    sidecar = prefix.with_name(prefix.name + ".json")
    sidecar.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(json.dumps(record, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    samples = synthdata.load_dataset(args.data, split="test")
    if args.limit:
        positives = [s for s in samples if s.y][:args.limit]
        samples = [s for s in samples if not s.y] + positives
    classifier = _load_checkpoint(args.classifier, "classifier")
    eval_cfg = dataclasses.replace(cfg.eval, saliency=cfg.saliency,
                                   ablation=args.ablation or cfg.eval.ablation,
                                   jobs=args.jobs or cfg.eval.jobs)
    gaps = []
    inpainter = None
    try:
        inpainter = _load_checkpoint(args.inpainter, "inpainter")
    except InputError as exc:
        gaps.append(("inpainter", str(exc)))
        eval_cfg = dataclasses.replace(eval_cfg, methods=tuple(m for m in eval_cfg.methods if m != "ours"),
                                       ablation=False)
    report = run_evaluation(samples, classifier, inpainter, eval_cfg)
    from .metrics import roc_auc
    images = np.concatenate([s.image for s in samples])
    labels = [s.y for s in samples]
    if inpainter is not None:
        roc = inp_mod.validate_inpainter_roc(classifier, inpainter, samples, cfg.roc_runs,
                                             stream(cfg.seed, "eval"))
        report.roc = dataclasses.asdict(roc)
    else:
        report.roc = {"original": roc_auc(cls_mod.predict(images, classifier), labels),
                      "healthy_inpainted": float("nan"), "lesion_inpainted": float("nan")}
    report.errors = gaps + report.errors
    paths = write_report(report, args.out)
    _write_resolved(cfg, args.out)
    print(paths["summary"].read_text(), end="")
    return EXIT_OK if report.complete else EXIT_INCOMPLETE


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inpaint-saliency",
                                     description="Inpainting-based saliency maps for image classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="master seed (default 42)")

    p = sub.add_parser("gen-data", help="write the synthetic benchmark to disk")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--counts", type=int, nargs=4, default=list(synthdata.DEFAULT_COUNTS),
                   metavar=("TRAIN_HEALTHY", "TRAIN_MASS", "TEST_HEALTHY", "TEST_MASS"))
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    for name, func in (("train-classifier", cmd_train_classifier), ("train-inpainter", cmd_train_inpainter)):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="checkpoint directory")
        if name == "train-inpainter":
            p.add_argument("--features", help="classifier checkpoint for perceptual/style features")
        p.set_defaults(func=func)

    p = sub.add_parser("explain", help="explain one image")
    common(p)
    p.add_argument("--image", required=True, help="sample id (with --data) or image file")
    p.add_argument("--organ", help="organ mask file when --image is a file")
    p.add_argument("--data")
    p.add_argument("--method", choices=("ours", "cam", "sal"), default="ours")
    p.add_argument("--classifier", required=True)
    p.add_argument("--inpainter")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="ROC triple, localisation metrics and tests")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--inpainter")
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", action="store_true", help="add rows with lambda_tv = lambda_ar = 0")
    p.add_argument("--jobs", type=int, default=0)
    p.add_argument("--limit", type=int, default=0, help="evaluate only the first N positives")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
