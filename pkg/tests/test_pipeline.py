import dataclasses
import json

import numpy as np
import pytest
import torch

from semdefect.errors import ConfigError, StageError, TrainingDivergedError
from semdefect.losses import weighted_bce
from semdefect.net import NetConfig
from semdefect.pipeline import cli
from semdefect.pipeline.config import (
    ExperimentConfig,
    OptimConfig,
    TrainConfig,
    apply_overrides,
    build_dataclass,
    load_config,
    save_config,
)
from semdefect.pipeline.experiment import preset, run_experiment
from semdefect.pipeline.infer import infer
from semdefect.pipeline.trainer import Trainer, load_split, train
from semdefect.simgen import DatasetConfig, gen_dataset, load_manifest

TINY_NET = NetConfig(depth=3, base_channels=8, embed_dim=8, groups=4)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    gen_dataset(DatasetConfig(n_train=10, n_test=4, n_holdout=2, image_size=64, seed=1), root)
    return load_manifest(root)


def tiny(mode="wbce", **kw):
    net = dataclasses.replace(TINY_NET, in_channels=2 if mode == "ref-def" else 1)
    base = dict(mode=mode, net=net, optim=OptimConfig(lr=3e-3, steps=3, batch_size=4), seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="train.optim.lrate"):
            build_dataclass(ExperimentConfig, {"train": {"optim": {"lrate": 1}}})

    def test_overrides_and_roundtrip(self, tmp_path):
        data = apply_overrides({}, ["train.optim.lr=5e-4", "modes=[wbce, ref-def]", "dataset.periods=[8, 12]"])
        cfg = build_dataclass(ExperimentConfig, data).validate()
        assert cfg.train.optim.lr == 5e-4 and cfg.modes == ("wbce", "ref-def")
        assert cfg.dataset.periods == (8, 12)
        save_config(cfg, tmp_path / "c.yaml")
        assert load_config(tmp_path / "c.yaml") == cfg

    def test_schema_version(self):
        with pytest.raises(ConfigError, match="schema_version"):
            build_dataclass(ExperimentConfig, {"schema_version": 2}).validate()

    def test_override_syntax(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["train.optim.lr"])

    def test_dclr_needs_two_samples(self):
        with pytest.raises(ConfigError, match=">=2 samples"):
            tiny("wbce+dclr", optim=OptimConfig(batch_size=1)).validate()

    def test_mode_channel_agreement(self):
        with pytest.raises(ConfigError, match="in_channels"):
            TrainConfig(mode="ref-def").validate()

    def test_effective_loss(self):
        assert tiny("wbce").effective_loss().lambda_clr == 0.0
        assert tiny("wbce+dclr").effective_loss().lambda_cons == 0.0
        assert tiny("wbce+consistency").effective_loss().lambda_cons > 0

    def test_presets_validate(self):
        for name in ("easy-synthetic", "ablation", "ref-def", "smoke"):
            preset(name)
        cfg = preset("easy-synthetic")
        assert cfg.train.optim.steps * cfg.train.optim.batch_size <= 20_000
        assert cfg.dataset.n_train == 200 and cfg.dataset.n_test == 50


class TestTrainer:
    def test_wbce_descends(self, manifest):
        _, images, _ = load_split(manifest, "train")
        cfg = tiny(optim=OptimConfig(lr=3e-3, steps=50, batch_size=4))
        trainer = Trainer(cfg, images)
        x, m, w, _ = Trainer(dataclasses.replace(cfg, seed=99), images).draw_batch()

        def fixed_loss():
            trainer.student.eval()
            with torch.no_grad():
                return weighted_bce(trainer.student(x).prob_map, m, w).item()

        before = fixed_loss()
        for _ in range(50):
            trainer.step()
        assert fixed_loss() < 0.8 * before

    @pytest.mark.parametrize("mode", ["wbce", "wbce+dclr", "wbce+consistency", "ref-def"])
    def test_modes_run_and_are_deterministic(self, manifest, mode):
        _, images, refs = load_split(manifest, "train", need_refs=mode == "ref-def")
        runs = []
        for _ in range(2):
            torch.manual_seed(0)
            t = Trainer(tiny(mode), images, refs)
            runs.append([t.step() for _ in range(2)])
        assert runs[0] == runs[1]
        assert all(np.isfinite(r["total"]) for r in runs[0])
        if mode == "wbce+dclr":
            assert runs[0][0]["clr"] > 0
        if mode == "wbce+consistency":
            assert runs[0][0]["cons"] > 0 and "teacher_bce" in runs[0][0]

    def test_nan_aborts(self, manifest):
        _, images, _ = load_split(manifest, "train")
        t = Trainer(tiny(), images)
        with torch.no_grad():
            t.student.seg_head.bias.fill_(float("nan"))
        with pytest.raises(TrainingDivergedError, match="bce"):
            t.step()

    def test_teacher_storage_is_separate(self, manifest):
        _, images, _ = load_split(manifest, "train")
        t = Trainer(tiny("wbce+consistency"), images)
        student_ptrs = {p.data_ptr() for p in t.student.parameters()}
        assert not student_ptrs & {p.data_ptr() for p in t.teacher.parameters()}
        before = [p.detach().clone() for p in t.teacher.parameters()]
        with torch.no_grad():
            for p in t.student.parameters():
                p.add_(1.0)
        assert all(torch.equal(a, b) for a, b in zip(before, t.teacher.parameters()))
        t.step()
        assert any(not torch.equal(a, b) for a, b in zip(before, t.teacher.parameters()))

    def test_ref_def_needs_references(self, tmp_path):
        gen_dataset(DatasetConfig(n_train=4, n_test=1, n_holdout=0, with_references=False), tmp_path)
        with pytest.raises(ConfigError, match="reference"):
            train(tiny("ref-def", manifest=str(tmp_path / "manifest.json"), out_dir=str(tmp_path / "run")))

    def test_train_writes_artifacts(self, manifest, tmp_path):
        cfg = tiny(checkpoint_every=2, optim=OptimConfig(steps=4, batch_size=2), out_dir=str(tmp_path))
        run = train(cfg, manifest)
        assert len(run.steps) == 4
        assert (tmp_path / "final.pt").exists() and (tmp_path / "step_000002.pt").exists()
        assert len((tmp_path / "train_log.jsonl").read_text().splitlines()) == 4

    def test_infer_is_deterministic(self, manifest, tmp_path):
        run = train(tiny(out_dir=str(tmp_path)), manifest)
        _, images, _ = load_split(manifest, "test")
        p1, d1, _ = infer(run.checkpoint, images, out_dir=tmp_path / "inf")
        p2, d2, _ = infer(run.checkpoint, images)
        assert np.array_equal(p1, p2) and d1 == d2
        assert (tmp_path / "inf" / "detections.jsonl").exists()
        assert len(list((tmp_path / "inf").glob("*_prob.png"))) == len(images)


def test_smoke_experiment(tmp_path):
    cfg = preset("smoke", out_dir=str(tmp_path))
    cfg = dataclasses.replace(cfg, modes=("wbce", "ref-def"))
    summary = run_experiment(cfg)
    assert set(summary["methods"]) == {"wbce", "ref-def", "classic-ref"}
    for name in summary["methods"]:
        assert (tmp_path / name / "metrics.json").exists()
        assert (tmp_path / name / "pr_curve.png").exists()
    assert (tmp_path / "summary.md").read_text().startswith("| Algorithm")
    # rerunning reuses the generated data
    stamp = (tmp_path / "data" / "manifest.json").stat().st_mtime_ns
    run_experiment(dataclasses.replace(cfg, modes=(), run_baseline=False))
    assert (tmp_path / "data" / "manifest.json").stat().st_mtime_ns == stamp


def test_experiment_stage_error(tmp_path):
    cfg = preset("smoke", out_dir=str(tmp_path))
    too_big = dataclasses.replace(cfg.train.copy_paste, patch_height=200)
    optim = dataclasses.replace(cfg.train.optim, steps=1)
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, copy_paste=too_big, optim=optim))
    with pytest.raises(StageError, match=r"train\[wbce\]"):
        run_experiment(cfg)


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    cli.main(["generate", "--out", str(data), "--n-train", "6", "--n-test", "3", "--set", "dataset.n_holdout=0"])
    manifest = str(data / "manifest.json")
    net = ["--set", "train.net.depth=3", "--set", "train.net.base_channels=8", "--set", "train.net.groups=4"]
    cli.main(["train", "--manifest", manifest, "--out", str(tmp_path / "run"), "--steps", "2", "--batch-size", "2", *net])
    cli.main(["infer", "--checkpoint", str(tmp_path / "run" / "final.pt"), "--manifest", manifest, "--out", str(tmp_path / "inf")])
    cli.main(["baseline", "--manifest", manifest, "--out", str(tmp_path / "base")])
    cli.main(["evaluate", "--detections", str(tmp_path / "base" / "detections.jsonl"), "--manifest", manifest,
              "--out", str(tmp_path / "eval")])
    metrics = json.loads((tmp_path / "eval" / "metrics.json").read_text())
    assert set(metrics) == {"precision", "recall", "f_measure", "counts"}
    cli.main(["plot-pr", "--csv", str(tmp_path / "eval" / "pr_curve.csv"), "--out", str(tmp_path / "pr.png")])
    assert (tmp_path / "pr.png").stat().st_size > 0
    out = capsys.readouterr().out
    assert "max recall" in out and "detections" in out


def test_cli_rejects_unknown_key(tmp_path):
    with pytest.raises(ConfigError):
        cli.main(["generate", "--out", str(tmp_path), "--set", "dataset.bogus=1"])
