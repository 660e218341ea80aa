"""Command-line entry point: ``semdefect <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..classic import baseline
from ..detect import read_jsonl, write_jsonl
from ..evalkit import (
    emit_metrics,
    emit_plot,
    evaluate,
    gts_from_mask,
    pr_curve,
    read_curve_csv,
    write_curve_csv,
)
from ..simgen import gen_dataset, load_image, load_manifest, load_mask, resolve
from .config import ExperimentConfig, apply_overrides, build_dataclass
from .experiment import PRESETS, run_experiment
from .infer import infer
from .trainer import train

# flag -> dotted config key
FLAG_KEYS = {
    "out": "out_dir",
    "mode": "train.mode",
    "steps": "train.optim.steps",
    "batch_size": "train.optim.batch_size",
    "lr": "train.optim.lr",
    "seed": "train.seed",
    "n_train": "dataset.n_train",
    "n_test": "dataset.n_test",
    "threshold": "detect.threshold",
    "min_area": "detect.min_area",
    "k_sigma": "classic.k_sigma",
}


def _config(args) -> ExperimentConfig:
    import yaml

    if getattr(args, "preset", None):
        data = json.loads(json.dumps(PRESETS[args.preset]))
    elif args.config:
        data = yaml.safe_load(Path(args.config).read_text()) or {}
    else:
        data = {}
    overrides = list(args.set or [])
    for flag, key in FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={json.dumps(val)}")
    return build_dataclass(ExperimentConfig, apply_overrides(data, overrides)).validate()


def _split(manifest, split):
    recs = [r for r in manifest["records"] if r["split"] == split]
    if not recs:
        sys.exit(f"manifest has no records in split '{split}'")
    return recs


def cmd_generate(args):
    cfg = _config(args)
    out = Path(args.out or cfg.out_dir)
    manifest = gen_dataset(cfg.dataset, out)
    print(f"wrote {len(manifest['records'])} records to {out / 'manifest.json'}")


def cmd_train(args):
    cfg = _config(args)
    import dataclasses

    tcfg = cfg.train
    in_ch = 2 if tcfg.mode == "ref-def" else 1
    tcfg = dataclasses.replace(
        tcfg,
        manifest=args.manifest,
        out_dir=args.out or tcfg.out_dir,
        net=dataclasses.replace(tcfg.net, in_channels=in_ch),
    )
    run = train(tcfg)
    print(json.dumps({"checkpoint": run.checkpoint, "steps": len(run.steps), "wall_clock": run.wall_clock,
                      "config_digest": run.config_digest}))


def cmd_infer(args):
    manifest = load_manifest(args.manifest)
    recs = _split(manifest, args.split)
    images = np.stack([load_image(resolve(manifest, r["image_path"])) for r in recs])
    refs = None
    if all("reference_path" in r for r in recs):
        refs = np.stack([load_image(resolve(manifest, r["reference_path"])) for r in recs])
    ids = [Path(r["image_path"]).stem for r in recs]
    from ..net import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    _, dets, _ = infer(model, images, refs if model.cfg.in_channels == 2 else None,
                       args.threshold, args.min_area, args.out, ids)
    print(f"{sum(map(len, dets))} detections in {len(ids)} images -> {Path(args.out) / 'detections.jsonl'}")


def cmd_baseline(args):
    manifest = load_manifest(args.manifest)
    recs = _split(manifest, args.split)
    per_image = {}
    for r in recs:
        if "reference_path" not in r:
            sys.exit("baseline needs reference images in the manifest")
        im = load_image(resolve(manifest, r["image_path"]))
        ref = load_image(resolve(manifest, r["reference_path"]))
        per_image[Path(r["image_path"]).stem] = baseline(ref, im, args.k_sigma, args.min_area, args.lowpass_sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "detections.jsonl", per_image)
    print(f"{sum(map(len, per_image.values()))} detections -> {out / 'detections.jsonl'}")


def cmd_evaluate(args):
    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    recs = _split(manifest, args.split)
    found = read_jsonl(args.detections)
    ids = [Path(r["image_path"]).stem for r in recs]
    dets = [[d for d in found.get(i, []) if not d.filtered] for i in ids]
    filt = [[d for d in found.get(i, []) if d.filtered] for i in ids]
    gts = [gts_from_mask(load_mask(resolve(manifest, r["mask_path"]))) for r in recs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = emit_metrics(evaluate(dets, gts, cfg.match, filt), out / "metrics.json")
    curve = pr_curve(dets, gts, cfg.match, cfg.pr_grid)
    write_curve_csv(curve, out / "pr_curve.csv")
    emit_plot(curve, out / "pr_curve.png")
    print(json.dumps(metrics))


def cmd_plot_pr(args):
    marker = emit_plot(read_curve_csv(args.csv), args.out)
    if marker is not None:
        print(f"max recall {marker.recall:.3f} at threshold {marker.threshold:.3f}")


def cmd_experiment(args):
    cfg = _config(args)
    summary = run_experiment(cfg)
    for name, m in summary["methods"].items():
        print(f"{name:18s} F={m['f_measure']:.3f} P={m['precision']:.3f} R={m['recall']:.3f}")
    print(f"results in {cfg.out_dir}")


def build_parser():
    p = argparse.ArgumentParser(prog="semdefect", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML/JSON experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, e.g. train.optim.lr=5e-4")
        return sp

    sp = with_config(sub.add_parser("generate", help="write a synthetic dataset"))
    sp.add_argument("--out")
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-test", type=int)
    sp.set_defaults(func=cmd_generate)

    sp = with_config(sub.add_parser("train", help="train a segmenter"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out")
    sp.add_argument("--mode")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="probability maps and detections from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--min-area", type=int, default=4)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("baseline", help="classic reference-vs-defect detection")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", required=True)
    sp.add_argument("--k-sigma", type=float, default=5.0)
    sp.add_argument("--min-area", type=int, default=4)
    sp.add_argument("--lowpass-sigma", type=float, default=1.0)
    sp.set_defaults(func=cmd_baseline)

    sp = with_config(sub.add_parser("evaluate", help="score detections against manifest masks"))
    sp.add_argument("--detections", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("plot-pr", help="render a PR-curve CSV")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot_pr)

    sp = with_config(sub.add_parser("experiment", help="generate, train, infer and evaluate in one go"))
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--out")
    sp.add_argument("--mode", dest="modes_flag", action="append", help="training mode(s) to run")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "modes_flag", None):
        args.set = list(args.set or []) + [f"modes={json.dumps(args.modes_flag)}"]
    args.func(args)


if __name__ == "__main__":
    main()

