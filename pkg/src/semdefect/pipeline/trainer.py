"""Training loop for the supervised and semi-supervised variants."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..augment import copy_paste, photometric, weight_map
from ..classic import phase_correlate, register
from ..errors import ConfigError, TrainingDivergedError
from ..losses import total_loss, weighted_bce
from ..net import build_pair, save_checkpoint
from ..simgen import DefectMask, SemImage, load_image, load_manifest, resolve
from .config import TrainConfig, digest, to_dict

log = logging.getLogger(__name__)


@dataclass
class RunRecord:
    steps: list[dict] = field(default_factory=list)
    checkpoint: str = ""
    wall_clock: float = 0.0
    config_digest: str = ""


def aligned_reference(image, reference):
    """Reference registered onto ``image`` by phase correlation."""
    return register(reference, phase_correlate(reference, image))


def load_split(manifest, split, need_refs=False):
    """Images (and registered references) of one manifest split as float32 arrays."""
    recs = [r for r in manifest["records"] if r["split"] == split]
    if need_refs and any("reference_path" not in r for r in recs):
        raise ConfigError(f"ref-def mode needs reference images for every '{split}' record in the manifest")
    imgs = np.stack([load_image(resolve(manifest, r["image_path"])) for r in recs]) if recs else np.zeros((0, 0, 0))
    refs = None
    if need_refs:
        refs = np.stack(
            [aligned_reference(im, load_image(resolve(manifest, r["reference_path"]))) for im, r in zip(imgs, recs)]
        )
    return recs, imgs.astype(np.float32), None if refs is None else refs.astype(np.float32)


class Trainer:
    """Owns the networks, optimizers and the sampling RNG for one run."""

    def __init__(self, cfg: TrainConfig, images, refs=None):
        self.cfg = cfg.validate()
        if len(images) == 0:
            raise ConfigError("training split is empty")
        if cfg.mode == "ref-def" and refs is None:
            raise ConfigError("ref-def mode needs paired references")
        self.images = images
        self.refs = refs
        self.loss_cfg = cfg.effective_loss()
        self.student, self.teacher = build_pair(cfg.net, cfg.seed)
        self.opt = torch.optim.Adam(self.student.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
        self.use_teacher = cfg.mode == "wbce+consistency"
        if self.use_teacher:
            self.teacher_opt = torch.optim.Adam(
                self.teacher.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay
            )
        else:
            self.teacher = None
        self.rng = np.random.default_rng(cfg.seed)
        self.step_idx = 0

    def _seed(self):
        return int(self.rng.integers(0, 2**31 - 1))

    def draw_batch(self):
        """Copy-paste implanted batch: inputs (B, C, H, W), masks and weights (B, 1, H, W).

        A ``clean_fraction`` share of the samples is left untouched with an
        all-zero label, so the network also sees images without anomalies.
        The others receive between 1 and ``copy_paste.count`` patches.
        """
        n = len(self.images)
        bs = self.cfg.optim.batch_size
        idx = self.rng.choice(n, size=bs, replace=n < bs)
        xs, ms, ws, aug = [], [], [], []
        for i in idx:
            paste_seed = self._seed()
            if self.rng.random() < self.cfg.clean_fraction:
                img, mask = SemImage(self.images[i]), DefectMask(np.zeros(self.images[i].shape, np.uint8))
            else:
                n_paste = int(self.rng.integers(1, self.cfg.copy_paste.count + 1))
                spec = dataclasses.replace(self.cfg.copy_paste, count=n_paste)
                img, mask = copy_paste(self.images[i], spec, paste_seed)
            chans = [img.pixels]
            if self.refs is not None:
                chans.append(self.refs[i])
            xs.append(np.stack(chans))
            ms.append(mask.labels[None])
            ws.append(weight_map(mask).weights[None])
            if self.loss_cfg.lambda_clr > 0:
                view = photometric(img, self.cfg.photometric, self._seed()).pixels
                aug.append(np.stack([view] + chans[1:]))
        as_t = lambda a: torch.as_tensor(np.stack(a), dtype=torch.float32)  # noqa: E731
        return as_t(xs), as_t(ms), as_t(ws), (as_t(aug) if aug else None)

    def step(self) -> dict:
        x, m, w, x_aug = self.draw_batch()
        clr_seed = self._seed()
        self.student.train()
        out = self.student(x)
        outputs = {"prob": out.prob_map}
        if x_aug is not None:
            outputs["embeds"] = self.student.project(self.student.embed_features(out))
            outputs["aug_embeds"] = self.student.project(self.student.embed_features(self.student(x_aug)))
        teacher_out = None
        if self.use_teacher:
            teacher_out = self.teacher(x)
            outputs["teacher_prob"] = teacher_out.prob_map
        total, parts = total_loss(outputs, {"mask": m, "weights": w}, self.loss_cfg, seed=clr_seed)
        record = {"step": self.step_idx, "lr": self.cfg.optim.lr}
        for term, value in parts.items():
            record[term] = float(value.detach())
        record["total"] = float(total.detach())
        for term in ("bce", "clr", "cons", "total"):
            if not math.isfinite(record[term]):
                raise TrainingDivergedError(term, self.step_idx)

        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()
        if teacher_out is not None:
            # the teacher learns only from the shared supervised term
            t_loss = weighted_bce(teacher_out.prob_map, m, w, self.loss_cfg.clamp_eps)
            record["teacher_bce"] = float(t_loss.detach())
            if not math.isfinite(record["teacher_bce"]):
                raise TrainingDivergedError("teacher_bce", self.step_idx)
            self.teacher_opt.zero_grad(set_to_none=True)
            t_loss.backward()
            self.teacher_opt.step()
        self.step_idx += 1
        return record


def train(cfg: TrainConfig, manifest=None, log_path=None) -> RunRecord:
    """Run ``cfg.optim.steps`` updates and write checkpoints and a JSON-lines log to ``cfg.out_dir``."""
    cfg.validate()
    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)
    if manifest is None:
        if not cfg.manifest:
            raise ConfigError("no dataset manifest given")
        manifest = load_manifest(cfg.manifest)
    _, images, refs = load_split(manifest, "train", need_refs=cfg.mode == "ref-def")
    trainer = Trainer(cfg, images, refs)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_path) if log_path else out / "train_log.jsonl"
    run = RunRecord(config_digest=digest(cfg))
    extra = {"train_config": to_dict(cfg), "config_digest": run.config_digest}
    with open(log_path, "w") as fh:
        for _ in range(cfg.optim.steps):
            rec = trainer.step()
            run.steps.append(rec)
            fh.write(json.dumps(rec) + "\n")
            if rec["step"] % 100 == 0:
                log.info("step %d total %.4f", rec["step"], rec["total"])
            if cfg.checkpoint_every and (rec["step"] + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"step_{rec['step'] + 1:06d}.pt", trainer.student, extra)
    run.checkpoint = str(out / "final.pt")
    save_checkpoint(run.checkpoint, trainer.student, extra)
    run.wall_clock = time.perf_counter() - t0
    return run
