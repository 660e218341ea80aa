"""Checkpoint inference: probability maps and detections."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..detect import detect, write_jsonl
from ..errors import ShapeError
from ..net import UNet, load_checkpoint
from .trainer import aligned_reference


@torch.no_grad()
def predict(model: UNet, images, refs=None, batch_size=16) -> np.ndarray:
    """Probability maps ``(N, H, W)`` for grayscale images ``(N, H, W)``."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 3:
        raise ShapeError(f"expected images (N, H, W), got {images.shape}")
    d = model.cfg.divisor
    if images.shape[1] % d or images.shape[2] % d:
        raise ShapeError(
            f"images of size {images.shape[1:]} do not fit checkpoint config "
            f"(depth={model.cfg.depth} needs H, W divisible by {d})"
        )
    if model.cfg.in_channels == 2:
        if refs is None:
            raise ShapeError("checkpoint expects (image, reference) pairs; no references given")
        refs = np.stack([aligned_reference(im, r) for im, r in zip(images, refs)]).astype(np.float32)
        x = np.stack([images, refs], axis=1)
    else:
        x = images[:, None]
    model.eval()
    out = []
    for i in range(0, len(x), batch_size):
        out.append(model(torch.from_numpy(x[i:i + batch_size])).prob_map[:, 0].numpy())
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:], np.float32)


def infer(checkpoint, images, refs=None, threshold=0.5, min_area=4, out_dir=None, image_ids=None):
    """Run the model and the detector.

    Returns ``(prob_maps, detections, filtered)``, the last two being lists
    with one entry per image. With ``out_dir`` the maps are written as 8-bit
    PNGs and the detections as ``detections.jsonl``.
    """
    model = checkpoint if isinstance(checkpoint, UNet) else load_checkpoint(checkpoint)[0]
    probs = predict(model, images, refs)
    dets, filt = [], []
    for p in probs:
        k, f = detect(p, threshold, min_area, keep_filtered=True)
        dets.append(k)
        filt.append(f)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ids = list(image_ids) if image_ids is not None else [f"{i:04d}" for i in range(len(probs))]
        for name, p in zip(ids, probs):
            Image.fromarray(np.round(p * 255).astype(np.uint8), mode="L").save(out / f"{Path(str(name)).stem}_prob.png")
        write_jsonl(out / "detections.jsonl", dict(zip(ids, dets)))
    return probs, dets, filt
