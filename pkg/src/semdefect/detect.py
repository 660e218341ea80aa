"""Probability map -> blobs -> ellipse detections."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
AXIS_FLOOR = 0.5


@dataclass
class Blob:
    pixels: np.ndarray  # (N, 2) int (row, col)
    mean_score: float = float("nan")

    @property
    def area(self):
        return len(self.pixels)


@dataclass
class Detection:
    center: tuple[float, float]
    major_axis: float
    minor_axis: float
    angle: float
    score: float
    area: int
    filtered: bool = False

    def to_record(self, image_id=None):
        rec = {
            "image_id": image_id,
            "center": [float(self.center[0]), float(self.center[1])],
            "axes": [float(self.major_axis), float(self.minor_axis)],
            "angle": float(self.angle),
            "score": float(self.score),
            "area": int(self.area),
        }
        if self.filtered:
            rec["filtered"] = True
        return rec

    @classmethod
    def from_record(cls, rec):
        return cls(
            center=tuple(rec["center"]),
            major_axis=rec["axes"][0],
            minor_axis=rec["axes"][1],
            angle=rec["angle"],
            score=rec["score"],
            area=rec["area"],
            filtered=rec.get("filtered", False),
        )


def binarize(prob_map, threshold):
    return (np.asarray(prob_map) >= threshold).astype(np.uint8)


def connected_components(mask, score_map=None) -> list[Blob]:
    """Maximal 4-connected foreground sets, ordered by (min row, min col)."""
    labels, n = ndi.label(np.asarray(mask) > 0, structure=FOUR_CONNECTED)
    if n == 0:
        return []
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    order = np.argsort(lab, kind="stable")
    rows, cols, lab = rows[order], cols[order], lab[order]
    splits = np.flatnonzero(np.diff(lab)) + 1
    blobs = []
    for r, c in zip(np.split(rows, splits), np.split(cols, splits)):
        pix = np.stack([r, c], axis=1)
        score = float(np.mean(score_map[r, c])) if score_map is not None else float("nan")
        blobs.append(Blob(pix, score))
    blobs.sort(key=lambda b: (int(b.pixels[:, 0].min()), int(b.pixels[:, 1].min())))
    return blobs


def fit_ellipse(blob: Blob, prob_map=None) -> Detection:
    """Moment ellipse of a blob.

    Axes are twice the square roots of the eigenvalues of the (population)
    second central moment matrix, floored at half a pixel. ``angle`` is the
    direction of the major axis measured from the column axis, in [0, pi).
    """
    pts = blob.pixels.astype(np.float64)
    center = pts.mean(axis=0)
    d = pts - center
    cov = d.T @ d / len(pts)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    evals = np.clip(evals, 0.0, None)
    major = max(2.0 * math.sqrt(evals[1]), AXIS_FLOOR)
    minor = max(2.0 * math.sqrt(evals[0]), AXIS_FLOOR)
    if evals[1] - evals[0] <= 1e-12:
        angle = 0.0
    else:
        v_row, v_col = evecs[:, 1]
        angle = math.atan2(v_row, v_col) % math.pi
        if math.isclose(angle, math.pi):
            angle = 0.0
    if prob_map is not None:
        score = float(np.mean(np.asarray(prob_map)[blob.pixels[:, 0], blob.pixels[:, 1]]))
    else:
        score = blob.mean_score
    return Detection((float(center[0]), float(center[1])), major, minor, angle, score, blob.area)


def detect(prob_map, threshold=0.5, min_area=4, *, keep_filtered=False):
    """Binarize, label, size-filter and fit ellipses.

    Blobs smaller than ``min_area`` become "filtered" candidates. With
    ``keep_filtered`` the call returns ``(detections, filtered)``; otherwise
    only the kept detections.
    """
    prob_map = np.asarray(prob_map, dtype=np.float64)
    kept, filtered = [], []
    for blob in connected_components(binarize(prob_map, threshold)):
        det = fit_ellipse(blob, prob_map)
        if blob.area < min_area:
            det.filtered = True
            filtered.append(det)
        else:
            kept.append(det)
    if keep_filtered:
        return kept, filtered
    return kept


def write_jsonl(path, per_image):
    """Write ``{image_id: [Detection, ...]}`` as JSON lines."""
    with open(path, "w") as fh:
        for image_id, dets in per_image.items():
            for det in dets:
                fh.write(json.dumps(det.to_record(image_id)) + "\n")


def read_jsonl(path):
    out: dict = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.setdefault(rec["image_id"], []).append(Detection.from_record(rec))
    return out
