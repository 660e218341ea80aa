"""Training-sample synthesis from clean backgrounds.

``copy_paste`` implants an anomaly by duplicating a patch elsewhere in the
same image and labels the destination. ``photometric`` is the
segmentation-preserving view used by the contrastive branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .simgen import DefectMask, SemImage, _as_pixels


@dataclass(frozen=True)
class CopyPasteSpec:
    """Patch geometry for copy-paste.

    ``patch_height``/``patch_width`` fix the size. When they are ``None``
    the size is drawn uniformly from ``height_range``/``width_range``
    (inclusive).
    """

    patch_height: int | None = None
    patch_width: int | None = None
    height_range: tuple[int, int] = (3, 10)
    width_range: tuple[int, int] = (3, 10)
    min_displacement: float = 4.0
    count: int = 1
    max_tries: int = 100

    def validate(self, shape=None):
        if self.min_displacement < 1:
            raise ParameterError(f"min_displacement must be >= 1, got {self.min_displacement}")
        if self.count < 0:
            raise ParameterError("count must be >= 0")
        hs = (self.patch_height, self.patch_height) if self.patch_height is not None else self.height_range
        ws = (self.patch_width, self.patch_width) if self.patch_width is not None else self.width_range
        if hs[0] < 1 or ws[0] < 1 or hs[0] > hs[1] or ws[0] > ws[1]:
            raise ParameterError(f"patch size ranges must be ordered and >= 1, got {hs} x {ws}")
        if shape is not None and (hs[1] > shape[0] or ws[1] > shape[1]):
            raise ParameterError(f"patch up to {hs[1]}x{ws[1]} does not fit image of shape {tuple(shape)}")
        return hs, ws


@dataclass(frozen=True)
class PhotometricSpec:
    noise_sigma: float = 0.03
    contrast_range: tuple[float, float] = (0.8, 1.2)
    brightness_range: tuple[float, float] = (-0.1, 0.1)

    def validate(self):
        if not self.noise_sigma >= 0:
            raise ParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        for name in ("contrast_range", "brightness_range"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ParameterError(f"{name} must be a finite ordered interval, got {(lo, hi)}")
        return self


@dataclass
class WeightMap:
    weights: np.ndarray


def _disjoint(a, b):
    (r0, c0, h0, w0), (r1, c1, h1, w1) = a, b
    return r0 + h0 <= r1 or r1 + h1 <= r0 or c0 + w0 <= c1 or c1 + w1 <= c0


def sample_placement(shape, spec: CopyPasteSpec, rng: np.random.Generator):
    """Draw ``(src_r, src_c, dst_r, dst_c, h, w)`` with disjoint, well-separated rectangles."""
    hs, ws = spec.validate(shape)
    H, W = shape
    for _ in range(spec.max_tries):
        h = int(rng.integers(hs[0], hs[1] + 1))
        w = int(rng.integers(ws[0], ws[1] + 1))
        sr, dr = rng.integers(0, H - h + 1, size=2)
        sc, dc = rng.integers(0, W - w + 1, size=2)
        if np.hypot(float(sr - dr), float(sc - dc)) < spec.min_displacement:
            continue
        if _disjoint((sr, sc, h, w), (dr, dc, h, w)):
            return int(sr), int(sc), int(dr), int(dc), h, w
    raise ParameterError(f"could not place disjoint {hs}x{ws} patches in image of shape {shape}")


def copy_paste(img, spec: CopyPasteSpec, seed) -> tuple[SemImage, DefectMask]:
    """Paste ``spec.count`` patches, each copied from elsewhere in the current image."""
    px = _as_pixels(img).copy()
    rng = np.random.default_rng(seed)
    mask = np.zeros(px.shape, np.uint8)
    for _ in range(spec.count):
        sr, sc, dr, dc, h, w = sample_placement(px.shape, spec, rng)
        px[dr:dr + h, dc:dc + w] = px[sr:sr + h, sc:sc + w]
        mask[dr:dr + h, dc:dc + w] = 1
    tag = img.seed if isinstance(img, SemImage) else 0
    return SemImage(px, seed=tag), DefectMask(mask)


def photometric(img, spec: PhotometricSpec, seed) -> SemImage:
    """``clip(a * img + b + noise, 0, 1)`` with ``a``, ``b`` drawn from the spec ranges."""
    spec.validate()
    px = _as_pixels(img)
    rng = np.random.default_rng(seed)
    a = rng.uniform(*spec.contrast_range)
    b = rng.uniform(*spec.brightness_range)
    out = a * px + b
    if spec.noise_sigma > 0:
        out = out + rng.normal(0.0, spec.noise_sigma, size=px.shape)
    tag = img.seed if isinstance(img, SemImage) else 0
    return SemImage(np.clip(out, 0.0, 1.0), seed=tag)


def weight_map(mask) -> WeightMap:
    """Class-balancing weights: ``N / (2 * N_class)`` per pixel, ones if a class is absent."""
    y = np.asarray(mask.labels if isinstance(mask, DefectMask) else mask)
    n = y.size
    n_fg = int(np.count_nonzero(y))
    n_bg = n - n_fg
    if n_fg == 0 or n_bg == 0:
        return WeightMap(np.ones(y.shape))
    return WeightMap(np.where(y > 0, n / (2.0 * n_fg), n / (2.0 * n_bg)))
