"""Detection scoring: hit / miss / false alarm / filtered, P, R, F and PR curves."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .detect import FOUR_CONNECTED, Detection, connected_components
from .errors import ParameterError

MODES = ("region", "distance", "overlap")


@dataclass(frozen=True)
class MatchCriteria:
    """When a detection counts as hitting a ground-truth region.

    ``region``: the detection center falls inside the region dilated by
    ``margin`` pixels. ``distance``: the center is within
    ``max_center_distance`` of the region centroid. ``overlap``: the
    detection ellipse covers at least ``min_overlap`` of the region.
    """

    mode: str = "region"
    margin: int = 2
    max_center_distance: float | None = None
    min_overlap: float | None = None

    def validate(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "region" and self.margin < 0:
            raise ParameterError("margin must be >= 0")
        if self.mode == "distance" and not (self.max_center_distance or 0) > 0:
            raise ParameterError("distance mode needs max_center_distance > 0")
        if self.mode == "overlap" and not (self.min_overlap is not None and 0 < self.min_overlap <= 1):
            raise ParameterError("overlap mode needs min_overlap in (0, 1]")
        return self


@dataclass
class GroundTruth:
    region: np.ndarray  # bool (H, W)

    @property
    def centroid(self):
        r, c = np.nonzero(self.region)
        return float(r.mean()), float(c.mean())


def gts_from_mask(mask) -> list[GroundTruth]:
    """One ground-truth region per 4-connected component of a label mask."""
    mask = np.asarray(mask)
    out = []
    for blob in connected_components(mask):
        region = np.zeros(mask.shape, bool)
        region[blob.pixels[:, 0], blob.pixels[:, 1]] = True
        out.append(GroundTruth(region))
    return out


@dataclass
class MatchReport:
    hits: int = 0
    misses: int = 0
    false_alarms: int = 0
    filtered: int = 0
    assignments: list = field(default_factory=list)  # (det_index, gt_index | None)

    def __add__(self, other):
        return MatchReport(
            self.hits + other.hits,
            self.misses + other.misses,
            self.false_alarms + other.false_alarms,
            self.filtered + other.filtered,
            self.assignments + other.assignments,
        )

    def counts(self):
        return {"hits": self.hits, "misses": self.misses, "false_alarms": self.false_alarms, "filtered": self.filtered}


def ellipse_mask(det: Detection, shape) -> np.ndarray:
    rr, cc = np.indices(shape, dtype=np.float64)
    dr, dc = rr - det.center[0], cc - det.center[1]
    cos, sin = math.cos(det.angle), math.sin(det.angle)
    along = dc * cos + dr * sin
    across = -dc * sin + dr * cos
    return (along / det.major_axis) ** 2 + (across / det.minor_axis) ** 2 <= 1.0


class _Matcher:
    def __init__(self, gts, criteria):
        self.gts = gts
        self.c = criteria.validate()
        if self.c.mode == "region" and self.c.margin > 0:
            self.regions = [
                ndi.binary_dilation(g.region, FOUR_CONNECTED, iterations=self.c.margin) for g in gts
            ]
        else:
            self.regions = [g.region for g in gts]
        self.centroids = [g.centroid for g in gts]

    def ok(self, det, j):
        if self.c.mode == "region":
            r, c = (int(round(v)) for v in det.center)
            reg = self.regions[j]
            return 0 <= r < reg.shape[0] and 0 <= c < reg.shape[1] and bool(reg[r, c])
        if self.c.mode == "distance":
            return math.dist(det.center, self.centroids[j]) <= self.c.max_center_distance
        region = self.regions[j]
        inter = np.count_nonzero(ellipse_mask(det, region.shape) & region)
        return inter / np.count_nonzero(region) >= self.c.min_overlap


def match(dets, gts, criteria: MatchCriteria = MatchCriteria(), filtered=()) -> MatchReport:
    """Greedy one-to-one matching in descending score order.

    Among the unassigned ground truths a detection qualifies for, the one
    with the nearest centroid is taken.
    """
    m = _Matcher(gts, criteria)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken: set[int] = set()
    assignments = []
    for i in order:
        cands = [j for j in range(len(gts)) if j not in taken and m.ok(dets[i], j)]
        if cands:
            j = min(cands, key=lambda j: (math.dist(dets[i].center, m.centroids[j]), j))
            taken.add(j)
            assignments.append((i, j))
        else:
            assignments.append((i, None))
    hits = len(taken)
    return MatchReport(
        hits=hits,
        misses=len(gts) - hits,
        false_alarms=len(dets) - hits,
        filtered=len(filtered),
        assignments=sorted(assignments),
    )


def precision_recall(report: MatchReport) -> tuple[float, float]:
    det_total = report.hits + report.false_alarms
    gt_total = report.hits + report.misses
    p = report.hits / det_total if det_total else 1.0
    r = report.hits / gt_total if gt_total else 1.0
    return p, r


def f_measure(p, r):
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


@dataclass
class PRPoint:
    threshold: float
    precision: float
    recall: float


@dataclass
class PRCurve:
    points: list[PRPoint]

    def max_recall_point(self) -> PRPoint:
        return max(self.points, key=lambda pt: pt.recall)

    def as_arrays(self):
        t = np.array([p.threshold for p in self.points])
        return t, np.array([p.precision for p in self.points]), np.array([p.recall for p in self.points])


def evaluate(per_image_dets, per_image_gts, criteria=MatchCriteria(), per_image_filtered=None) -> MatchReport:
    """Match image by image and pool the counts."""
    total = MatchReport()
    per_image_filtered = per_image_filtered or [()] * len(per_image_dets)
    for dets, gts, filt in zip(per_image_dets, per_image_gts, per_image_filtered):
        total = total + match(dets, gts, criteria, filt)
    return total


def pr_curve(per_image_dets, per_image_gts, criteria=MatchCriteria(), grid=()) -> PRCurve:
    """Precision and recall after dropping detections scored below each threshold."""
    grid = [float(t) for t in grid]
    if any(not 0 < t < 1 for t in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ParameterError("threshold grid must be strictly increasing within (0, 1)")
    points = []
    for t in grid:
        kept = [[d for d in dets if d.score >= t] for dets in per_image_dets]
        p, r = precision_recall(evaluate(kept, per_image_gts, criteria))
        points.append(PRPoint(t, p, r))
    return PRCurve(points)


def emit_metrics(report: MatchReport, path) -> dict:
    p, r = precision_recall(report)
    data = {"precision": p, "recall": r, "f_measure": f_measure(p, r), "counts": report.counts()}
    Path(path).write_text(json.dumps(data, indent=2))
    return data


def write_curve_csv(curve: PRCurve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        for pt in curve.points:
            w.writerow([pt.threshold, pt.precision, pt.recall])


def read_curve_csv(path) -> PRCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return PRCurve([PRPoint(float(r["threshold"]), float(r["precision"]), float(r["recall"])) for r in rows])


def emit_plot(curve: PRCurve, path, title="Precision-recall") -> PRPoint | None:
    """Render the curve with the maximum-recall point marked; returns that point."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4))
    marker = None
    if curve.points:
        _, prec, rec = curve.as_arrays()
        ax.plot(rec, prec, "-o", ms=3)
        marker = curve.max_recall_point()
        ax.plot([marker.recall], [marker.precision], "r*", ms=14, label=f"max recall {marker.recall:.2f} (t={marker.threshold:.2f})")
        ax.legend(loc="lower left")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return marker
