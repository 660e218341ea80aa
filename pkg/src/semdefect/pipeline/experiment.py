"""One-command desk-scale experiment: data -> train -> infer -> score."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np

from ..classic import baseline
from ..detect import write_jsonl
from ..errors import StageError
from ..evalkit import (
    emit_metrics,
    emit_plot,
    evaluate,
    f_measure,
    gts_from_mask,
    pr_curve,
    precision_recall,
    write_curve_csv,
)
from ..simgen import gen_dataset, load_image, load_manifest, load_mask, resolve
from .config import ExperimentConfig, build_dataclass, to_dict
from .infer import infer
from .trainer import train

log = logging.getLogger(__name__)

# Desk-scale preset: 200 clean training images, 50 easy-particle test images.
EASY_SYNTHETIC = {
    "out_dir": "runs/easy-synthetic",
    "dataset": {"n_train": 200, "n_test": 50, "n_holdout": 10, "image_size": 64},
    "train": {
        "net": {"depth": 3, "base_channels": 16, "embed_dim": 16},
        "optim": {"steps": 1500, "batch_size": 8, "lr": 1e-3},
        "copy_paste": {"count": 2},
    },
    "modes": ["wbce"],
}

PRESETS = {
    "easy-synthetic": EASY_SYNTHETIC,
    "ablation": {**EASY_SYNTHETIC, "out_dir": "runs/ablation", "modes": ["wbce", "wbce+dclr", "wbce+consistency"]},
    "ref-def": {**EASY_SYNTHETIC, "out_dir": "runs/ref-def", "modes": ["wbce", "ref-def"]},
    "smoke": {
        **EASY_SYNTHETIC,
        "out_dir": "runs/smoke",
        "dataset": {"n_train": 8, "n_test": 4, "n_holdout": 2, "image_size": 64},
        "train": {"net": {"depth": 3, "base_channels": 8, "embed_dim": 8, "groups": 4}, "optim": {"steps": 0, "batch_size": 2}},
    },
}


def preset(name: str, **overrides) -> ExperimentConfig:
    data = json.loads(json.dumps(PRESETS[name]))
    data.update(overrides)
    return build_dataclass(ExperimentConfig, data).validate()


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # re-raised with the stage attached
        raise StageError(name, exc) from exc


def ensure_dataset(cfg: ExperimentConfig, data_dir: Path):
    """Reuse ``data_dir`` when its manifest was generated from the same config."""
    mpath = data_dir / "manifest.json"
    if mpath.exists():
        manifest = load_manifest(mpath)
        if manifest.get("config") == to_dict(cfg.dataset):
            return manifest
    gen_dataset(cfg.dataset, data_dir)
    return load_manifest(mpath)


def _score(per_image_dets, per_image_filt, gts, cfg: ExperimentConfig, out: Path, title):
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(per_image_dets, gts, cfg.match, per_image_filt)
    metrics = emit_metrics(report, out / "metrics.json")
    curve = pr_curve(per_image_dets, gts, cfg.match, cfg.pr_grid)
    write_curve_csv(curve, out / "pr_curve.csv")
    emit_plot(curve, out / "pr_curve.png", title=title)
    recalls = [p.recall for p in curve.points]
    metrics["pr_recall_monotone"] = all(b <= a for a, b in zip(recalls, recalls[1:]))
    metrics["max_recall"] = max(recalls) if recalls else None
    return metrics


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every configured mode (and the classic baseline) on one synthetic split.

    Writes per-method ``metrics.json``, ``pr_curve.csv``, ``pr_curve.png``,
    ``detections.jsonl`` plus ``summary.json``/``summary.md`` under
    ``cfg.out_dir`` and returns the summary.
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _stage("generate", ensure_dataset, cfg, out / "data")

    test = [r for r in manifest["records"] if r["split"] == "test"]
    images = np.stack([load_image(resolve(manifest, r["image_path"])) for r in test])
    gts = [gts_from_mask(load_mask(resolve(manifest, r["mask_path"]))) for r in test]
    refs = None
    if all("reference_path" in r for r in test):
        refs = np.stack([load_image(resolve(manifest, r["reference_path"])) for r in test])
    holdout = [r for r in manifest["records"] if r["split"] == "holdout"]
    ids = [Path(r["image_path"]).stem for r in test]

    summary = {"config": to_dict(cfg), "methods": {}}
    for mode in cfg.modes:
        in_ch = 2 if mode == "ref-def" else 1
        tcfg = dataclasses.replace(
            cfg.train,
            mode=mode,
            manifest=str(out / "data" / "manifest.json"),
            out_dir=str(out / mode / "train"),
            net=dataclasses.replace(cfg.train.net, in_channels=in_ch),
        )
        run = _stage(f"train[{mode}]", train, tcfg, manifest)
        probs, dets, filt = _stage(
            f"infer[{mode}]", infer, run.checkpoint, images, refs if in_ch == 2 else None,
            cfg.detect.threshold, cfg.detect.min_area, out / mode / "infer", ids,
        )
        metrics = _stage(f"evaluate[{mode}]", _score, dets, filt, gts, cfg, out / mode, mode)
        metrics["train_seconds"] = run.wall_clock
        metrics["steps"] = len(run.steps)
        metrics["final_bce"] = run.steps[-1]["bce"] if run.steps else None
        metrics["nan_free"] = all(np.isfinite(s["total"]) for s in run.steps)
        if holdout and in_ch == 1:
            himgs = np.stack([load_image(resolve(manifest, r["image_path"])) for r in holdout])
            _, hdets, _ = infer(run.checkpoint, himgs, None, cfg.detect.threshold, cfg.detect.min_area)
            metrics["holdout_clean_detections"] = sum(len(d) for d in hdets)
        summary["methods"][mode] = metrics
        log.info("%s: F=%.3f P=%.3f R=%.3f", mode, metrics["f_measure"], metrics["precision"], metrics["recall"])

    if cfg.run_baseline and refs is not None:
        t0 = time.perf_counter()
        res = [
            _stage(
                "baseline", baseline, r, im, cfg.classic.k_sigma, cfg.classic.min_area,
                cfg.classic.lowpass_sigma, keep_filtered=True,
            )
            for r, im in zip(refs, images)
        ]
        dets = [k for k, _ in res]
        filt = [f for _, f in res]
        (out / "classic-ref").mkdir(parents=True, exist_ok=True)
        write_jsonl(out / "classic-ref" / "detections.jsonl", dict(zip(ids, dets)))
        metrics = _stage("evaluate[classic-ref]", _score, dets, filt, gts, cfg, out / "classic-ref", "classic-ref")
        metrics["seconds"] = time.perf_counter() - t0
        summary["methods"]["classic-ref"] = metrics

    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    (out / "summary.md").write_text(summary_table(summary))
    return summary


def summary_table(summary: dict) -> str:
    lines = ["| Algorithm | F-Measure | Precision | Recall |", "|---|---|---|---|"]
    for name, m in summary["methods"].items():
        lines.append(f"| {name} | {m['f_measure']:.2f} | {m['precision']:.2f} | {m['recall']:.2f} |")
    return "\n".join(lines) + "\n"


def report_from_metrics(m: dict):
    """(P, R, F) recomputed from the stored counts."""
    c = m["counts"]
    from ..evalkit import MatchReport

    p, r = precision_recall(MatchReport(c["hits"], c["misses"], c["false_alarms"], c["filtered"]))
    return p, r, f_measure(p, r)
