"""Evaluation harness: explains every test positive with each method and
scores the binary masks against ground truth."""

from __future__ import annotations

import csv
import logging
import math
import multiprocessing
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines
from .metrics import (connected_components, metric_A, metric_D, metric_H, metric_O,
                      median_aggregate, wilcoxon_signed_rank)
from .saliency import SaliencyConfig, deletion_score, optimize_saliency

log = logging.getLogger(__name__)

BASELINES = ("cam", "sal")
ABLATION = "ours_ablation"


@dataclass
class EvalConfig:
    percentiles: tuple = (50, 75, 90)
    methods: tuple = ("ours", "cam", "sal")
    ablation: bool = False
    d_direction: str = "result_to_gt"
    cam_upsample: str = "nearest"
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    jobs: int = 1


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)        # per image, method and percentile
    aggregates: list = field(default_factory=list)  # per method and percentile
    tests: list = field(default_factory=list)       # Wilcoxon comparisons
    errors: list = field(default_factory=list)      # (image id, message)
    roc: dict | None = None

    @property
    def complete(self) -> bool:
        return not self.errors

    def values(self, method: str, P: int, metric: str) -> dict[str, float]:
        return {r["id"]: r[metric] for r in self.rows if r["method"] == method and r["P"] == P}


def _method_masks(sample, classifier, inpainter, cfg: EvalConfig) -> tuple[dict, dict]:
    """Binary masks per (method, P) for one sample, plus the classifier score
    after deleting each optimised mask.  Optimised maps ignore P."""
    out, deleted = {}, {}
    optimised = []
    if "ours" in cfg.methods:
        optimised.append(("ours", cfg.saliency))
    if cfg.ablation:
        optimised.append((ABLATION, replace(cfg.saliency, lambda_tv=0.0, lambda_ar=0.0)))
    for method, scfg in optimised:
        smap = optimize_saliency(sample.image, sample.organ, classifier, inpainter, scfg)
        deleted[method] = deletion_score(sample.image, smap, classifier, inpainter)
        for P in cfg.percentiles:
            out[method, P] = smap.binary()
    for method in BASELINES:
        if method not in cfg.methods:
            continue
        if method == "cam":
            heat = baselines.cam(sample.image, classifier, cfg.cam_upsample)
        else:
            heat = baselines.sal(sample.image, classifier)
        for P in cfg.percentiles:
            out[method, P] = baselines.percentile_threshold(heat.values, P)
    return out, deleted


def evaluate_sample(sample, classifier, inpainter, cfg: EvalConfig) -> list[dict]:
    masks, deleted = _method_masks(sample, classifier, inpainter, cfg)
    rows = []
    for (method, P), mask in masks.items():
        ours = masks.get(("ours", P))
        rows.append({
            "id": sample.id, "method": method, "P": P,
            "D": metric_D(mask, sample.lesions, cfg.d_direction),
            "H": metric_H(mask, sample.lesions),
            "A": metric_A(mask, sample.organ),
            "O": metric_O(ours, mask) if method in BASELINES and ours is not None else math.nan,
            "n_components": len(connected_components(mask)),
            "area": int(mask.sum()),
            "p_deleted": deleted.get(method, math.nan),
        })
    return rows


# worker state for forked pools; set before the pool starts, read-only afterwards
_SHARED: dict = {}


def _work(sample):
    try:
        return sample.id, evaluate_sample(sample, _SHARED["classifier"], _SHARED["inpainter"],
                                          _SHARED["config"]), None
    except Exception as exc:   # reported as a gap, never aborts the run
        return sample.id, [], f"{type(exc).__name__}: {exc}"


def _stats(values):
    v = np.array([x for x in values if not math.isnan(x)], float)
    if len(v) == 0:
        return math.nan, math.nan, math.nan, 0
    return float(v.mean()), float(v.std()), median_aggregate(v), len(v)


def aggregate(rows, methods, percentiles) -> list[dict]:
    out = []
    for method in methods:
        for P in percentiles:
            sel = [r for r in rows if r["method"] == method and r["P"] == P]
            if not sel:
                continue
            rec = {"method": method, "P": P, "n": len(sel)}
            for metric in ("D", "H", "A", "O"):
                mean, std, med, n = _stats(r[metric] for r in sel)
                rec.update({f"{metric}_mean": mean, f"{metric}_std": std, f"{metric}_median": med,
                            f"{metric}_n": n})
            rec["missing"] = sum(math.isnan(r["D"]) or math.isnan(r["H"]) for r in sel)
            rec["components_mean"] = float(np.mean([r["n_components"] for r in sel]))
            scores = [r["p_deleted"] for r in sel if not math.isnan(r.get("p_deleted", math.nan))]
            # share of images whose prediction flips once the binary map is deleted
            rec["deletion_success"] = float(np.mean([p < 0.5 for p in scores])) if scores else math.nan
            out.append(rec)
    return out


def paired_tests(report: EvalReport, percentiles, against=BASELINES, subject: str = "ours") -> list[dict]:
    tests = []
    for P in percentiles:
        for metric in ("D", "H"):
            a = report.values(subject, P, metric)
            for other in against:
                b = report.values(other, P, metric)
                ids = [i for i in a if i in b and not math.isnan(a[i]) and not math.isnan(b[i])]
                rec = {"P": P, "metric": metric, "pair": f"{subject}-{other}", "n": len(ids)}
                try:
                    res = wilcoxon_signed_rank([a[i] - b[i] for i in ids])
                    rec.update(W=res.statistic, p=res.pvalue, method=res.method)
                except Exception as exc:
                    rec.update(W=math.nan, p=math.nan, method=f"unavailable: {exc}")
                tests.append(rec)
    return tests


def run_evaluation(samples, classifier, inpainter, config: EvalConfig | None = None) -> EvalReport:
    """Explain and score every positive sample; failures become report gaps."""
    cfg = config or EvalConfig()
    positives = [s for s in samples if s.y]
    _SHARED.update(classifier=classifier, inpainter=inpainter, config=cfg)
    try:
        if cfg.jobs > 1 and "fork" in multiprocessing.get_all_start_methods():
            with multiprocessing.get_context("fork").Pool(cfg.jobs) as pool:
                results = pool.map(_work, positives)
        else:
            results = [_work(s) for s in positives]
    finally:
        _SHARED.clear()
    report = EvalReport()
    for sample_id, rows, err in results:
        report.rows.extend(rows)
        if err:
            log.error("evaluation of %s failed: %s", sample_id, err)
            report.errors.append((sample_id, err))
    methods = list(cfg.methods) + ([ABLATION] if cfg.ablation else [])
    report.aggregates = aggregate(report.rows, methods, cfg.percentiles)
    report.tests = paired_tests(report, cfg.percentiles,
                                [m for m in BASELINES if m in cfg.methods])
    if cfg.ablation:
        report.tests += paired_tests(report, cfg.percentiles, [ABLATION])
    return report


# ------------------------------------------------------------------ output

ROW_FIELDS = ("id", "method", "P", "D", "H", "A", "O", "n_components", "area", "p_deleted")


def _fmt(v, digits=4):
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.{digits}g}"
    return v


def _pm(agg, metric, digits=2):
    if agg is None or math.isnan(agg[f"{metric}_mean"]):
        return "n/a"
    return f"{agg[f'{metric}_mean']:.{digits}f}±{agg[f'{metric}_std']:.{digits}f}"


def summary_text(report: EvalReport) -> str:
    methods = []
    for a in report.aggregates:
        if a["method"] not in methods:
            methods.append(a["method"])
    percentiles = sorted({a["P"] for a in report.aggregates})
    get = {(a["method"], a["P"]): a for a in report.aggregates}
    lines = []
    if report.roc:
        lines += ["ROC AUC", f"  original           {report.roc['original']:.3f}",
                  f"  healthy inpainted  {report.roc['healthy_inpainted']:.3f}",
                  f"  lesion inpainted   {report.roc['lesion_inpainted']:.3f}", ""]
    lines.append("Localisation (mean±std over images; pixels)")
    lines.append("P  | " + " | ".join(f"D_{m}" for m in methods) + " | "
                 + " | ".join(f"H_{m}" for m in methods))
    for P in percentiles:
        lines.append(f"{P} | " + " | ".join(_pm(get.get((m, P)), "D") for m in methods) + " | "
                     + " | ".join(_pm(get.get((m, P)), "H") for m in methods))
    lines.append("")
    lines.append("Compactness and overlap")
    others = [m for m in methods if m in BASELINES]
    lines.append("P  | " + " | ".join(f"A_{m}" for m in methods) + " | "
                 + " | ".join(f"O_ours-{m}" for m in others))
    for P in percentiles:
        lines.append(f"{P} | " + " | ".join(_pm(get.get((m, P)), "A", 3) for m in methods) + " | "
                     + " | ".join(_pm(get.get((m, P)), "O", 3) for m in others))
    lines.append("")
    lines.append("Medians: " + "; ".join(
        f"{m}@{P} D={_fmt(a['D_median'])} H={_fmt(a['H_median'])}" for (m, P), a in get.items()))
    lines.append("Excluded (empty mask): " + "; ".join(
        f"{m}@{P}={a['missing']}" for (m, P), a in get.items()))
    lines.append("Mean components: " + "; ".join(
        f"{m}@{P}={a['components_mean']:.2f}" for (m, P), a in get.items()))
    flips = [f"{m}={a['deletion_success']:.2f}" for (m, P), a in get.items()
             if P == percentiles[0] and not math.isnan(a["deletion_success"])]
    if flips:
        lines.append("Deletion success (p < 0.5 after inpainting the binary map): " + "; ".join(flips))
    if report.tests:
        lines.append("")
        lines.append("Wilcoxon signed-rank (two-sided)")
        for t in report.tests:
            lines.append(f"  P={t['P']} {t['metric']} {t['pair']}: n={t['n']} W={_fmt(t['W'])} "
                         f"p={_fmt(t['p'])} ({t['method']})")
    if report.errors:
        lines.append("")
        lines.append(f"INCOMPLETE: {len(report.errors)} image(s) failed")
        lines += [f"  {i}: {e}" for i, e in report.errors]
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, directory) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"rows": directory / "per_image.csv", "aggregates": directory / "aggregates.csv",
             "tests": directory / "wilcoxon.csv", "summary": directory / "summary.txt"}
    with open(paths["rows"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows({k: _fmt(r[k], 6) for k in ROW_FIELDS} for r in report.rows)
    if report.aggregates:
        with open(paths["aggregates"], "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(report.aggregates[0]), lineterminator="\n")
            w.writeheader()
            w.writerows({k: _fmt(v, 6) for k, v in a.items()} for a in report.aggregates)
    with open(paths["tests"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("P", "metric", "pair", "n", "W", "p", "method"),
                           lineterminator="\n")
        w.writeheader()
        w.writerows({k: _fmt(t[k], 6) for k in w.fieldnames} for t in report.tests)
    if report.roc:
        paths["roc"] = directory / "roc.csv"
        with open(paths["roc"], "w", newline="") as fh:
            fh.write("condition,auc\n")
            for k in ("original", "healthy_inpainted", "lesion_inpainted"):
                fh.write(f"{k},{report.roc[k]:.6f}\n")
    paths["summary"].write_text(summary_text(report))
    return paths
