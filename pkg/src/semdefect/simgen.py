"""Procedural SEM-like line patterns with implantable particle defects.

Everything here is a pure function of its parameter record and seed, so
samples can be generated in parallel and regenerated bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, gaussian_filter1d
from scipy.special import erfc

from .errors import ParameterError

ORIENTATIONS = ("horizontal", "vertical")


@dataclass(frozen=True)
class PatternSpec:
    """Geometry and photometry of a periodic line pattern.

    ``edge_roughness`` perturbs each line edge along its length (line-edge
    roughness). It breaks the exact periodicity of the pattern, which is
    what makes a shift between two captures recoverable.
    """

    width: int = 256
    height: int = 256
    line_period: int = 16
    line_width: int = 8
    orientation: str = "vertical"
    fg_level: float = 0.7
    bg_level: float = 0.3
    noise_sigma: float = 0.03
    edge_blur_sigma: float = 0.7
    phase: float = 0.0
    edge_roughness: float = 0.0
    roughness_corr: float = 4.0

    def validate(self):
        across = self.width if self.orientation == "vertical" else self.height
        if self.orientation not in ORIENTATIONS:
            raise ParameterError(f"orientation must be one of {ORIENTATIONS}, got {self.orientation!r}")
        if self.width < 1 or self.height < 1:
            raise ParameterError("width and height must be positive")
        if not 0 < self.line_width < self.line_period <= across:
            raise ParameterError(
                "need 0 < line_width < line_period <= image extent across the lines, got "
                f"line_width={self.line_width}, line_period={self.line_period}, extent={across}"
            )
        if not 0 <= self.bg_level < self.fg_level <= 1:
            raise ParameterError(
                f"need 0 <= bg_level < fg_level <= 1, got bg_level={self.bg_level}, fg_level={self.fg_level}"
            )
        if self.noise_sigma < 0:
            raise ParameterError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.edge_blur_sigma < 0:
            raise ParameterError(f"edge_blur_sigma must be >= 0, got {self.edge_blur_sigma}")
        if self.edge_roughness < 0 or self.roughness_corr <= 0:
            raise ParameterError("edge_roughness must be >= 0 and roughness_corr > 0")
        return self


@dataclass(frozen=True)
class DefectSpec:
    kind: str = "particle"
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 3.0
    intensity_delta: float = 0.4
    softness_sigma: float = 0.0

    @property
    def extent(self):
        """Radius beyond which the additive profile is exactly zero."""
        return self.radius + 3.0 * self.softness_sigma

    def validate(self, shape=None):
        if self.kind != "particle":
            raise ParameterError(f"unsupported defect kind {self.kind!r}")
        if self.radius <= 0:
            raise ParameterError(f"radius must be > 0, got {self.radius}")
        if self.softness_sigma < 0:
            raise ParameterError(f"softness_sigma must be >= 0, got {self.softness_sigma}")
        if shape is not None:
            r, c = self.center
            e = self.extent
            if r - e < 0 or c - e < 0 or r + e > shape[0] - 1 or c + e > shape[1] - 1:
                raise ParameterError(
                    f"defect footprint (center={self.center}, extent={e:.2f}) leaves image of shape {shape}"
                )
        return self


@dataclass
class SemImage:
    pixels: np.ndarray
    seed: int = 0
    reference: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ParameterError(f"SemImage must be 2-D, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ParameterError("SemImage contains non-finite values")
        if self.pixels.min(initial=0.0) < 0 or self.pixels.max(initial=0.0) > 1:
            raise ParameterError("SemImage values must lie in [0, 1]")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class DefectMask:
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels).astype(np.uint8)
        if not np.isin(self.labels, (0, 1)).all():
            raise ParameterError("DefectMask labels must be 0 or 1")

    @property
    def shape(self):
        return self.labels.shape


def _as_pixels(img):
    return img.pixels if isinstance(img, SemImage) else np.asarray(img, dtype=np.float64)


def _edge_offsets(rng, n_lines, length, spec):
    if spec.edge_roughness == 0:
        return np.zeros((n_lines, length))
    raw = rng.standard_normal((n_lines, length))
    smooth = gaussian_filter1d(raw, spec.roughness_corr, axis=1, mode="wrap")
    smooth /= smooth.std(axis=1, keepdims=True) + 1e-12
    return spec.edge_roughness * smooth


def _coverage(spec, rng):
    """Fraction of each pixel covered by line material, lines running along axis 0."""
    if spec.orientation == "vertical":
        length, across = spec.height, spec.width
    else:
        length, across = spec.width, spec.height
    p = spec.line_period
    k0 = math.floor(-spec.phase / p) - 1
    k1 = math.ceil((across - spec.phase) / p) + 1
    ks = np.arange(k0, k1 + 1)
    left = spec.phase + ks[:, None] * p + _edge_offsets(rng, len(ks), length, spec)
    right = left + spec.line_width + _edge_offsets(rng, len(ks), length, spec)
    cols = np.arange(across, dtype=np.float64)
    # overlap of pixel [c, c+1) with [left, right), summed over lines
    lo = np.maximum(cols[None, None, :], left[:, :, None])
    hi = np.minimum(cols[None, None, :] + 1.0, right[:, :, None])
    cov = np.clip(hi - lo, 0.0, 1.0).sum(axis=0)
    cov = np.clip(cov, 0.0, 1.0)
    return cov if spec.orientation == "vertical" else cov.T


def render_pattern(spec: PatternSpec, seed: int) -> np.ndarray:
    """Noiseless pattern (after edge blur) for ``(spec, seed)``."""
    spec.validate()
    rng = np.random.default_rng([seed, 0])
    img = spec.bg_level + (spec.fg_level - spec.bg_level) * _coverage(spec, rng)
    if spec.edge_blur_sigma > 0:
        img = gaussian_filter(img, spec.edge_blur_sigma, mode="nearest")
    return img


def gen_background(spec: PatternSpec, seed: int, noise_seed: int | None = None) -> SemImage:
    """Clean background image.

    The line geometry (including edge roughness) depends on ``seed`` only;
    the additive Gaussian noise uses ``noise_seed`` when given. Two calls
    sharing ``seed`` but not ``noise_seed`` emulate the same die location
    captured twice.
    """
    img = render_pattern(spec, seed)
    if spec.noise_sigma > 0:
        nrng = np.random.default_rng([seed if noise_seed is None else noise_seed, 1])
        img = img + nrng.normal(0.0, spec.noise_sigma, size=img.shape)
    return SemImage(np.clip(img, 0.0, 1.0), seed=seed)


def defect_profile(shape, d: DefectSpec) -> np.ndarray:
    """Additive intensity profile of a particle: a Gaussian-softened disk."""
    rr, cc = np.indices(shape, dtype=np.float64)
    dist = np.hypot(rr - d.center[0], cc - d.center[1])
    if d.softness_sigma == 0:
        return np.where(dist <= d.radius, d.intensity_delta, 0.0)
    with np.errstate(over="ignore", divide="ignore"):
        prof = 0.5 * erfc((dist - d.radius) / (math.sqrt(2.0) * d.softness_sigma))
    prof[dist > d.extent] = 0.0
    return d.intensity_delta * prof


def implant_defect(img, d: DefectSpec, seed: int | None = None) -> tuple[SemImage, DefectMask]:
    """Add a particle to ``img`` and return the image with its label mask.

    The mask is set where the profile magnitude exceeds half of its peak
    (the value at the particle center). ``seed`` is accepted for defect
    kinds with stochastic texture; particles are deterministic.
    """
    px = _as_pixels(img)
    d.validate(px.shape)
    prof = defect_profile(px.shape, d)
    if d.softness_sigma == 0:
        peak = abs(d.intensity_delta)
    else:
        peak = abs(d.intensity_delta) * 0.5 * erfc(-d.radius / (math.sqrt(2.0) * d.softness_sigma))
    if peak == 0:
        labels = np.zeros(px.shape, np.uint8)
    else:
        labels = (np.abs(prof) > 0.5 * peak).astype(np.uint8)
    out = np.clip(px + prof, 0.0, 1.0)
    tag = img.seed if isinstance(img, SemImage) else (seed or 0)
    return SemImage(out, seed=tag), DefectMask(labels)


# ---------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class DatasetConfig:
    """Recipe for a synthetic train/test split.

    Per-sample pattern parameters are drawn from the ranges below; every
    sample records its concrete ``PatternSpec`` and defects in the manifest.
    """

    n_train: int = 200
    n_test: int = 50
    n_holdout: int = 10
    image_size: int = 64
    periods: tuple[int, ...] = (12, 16)
    fill_fraction: float = 0.5
    fg_level: float = 0.7
    bg_level: float = 0.3
    level_jitter: float = 0.05
    noise_sigma: float = 0.03
    edge_blur_sigma: float = 0.7
    edge_roughness: float = 0.6
    orientations: tuple[str, ...] = ORIENTATIONS
    defects_per_image: tuple[int, int] = (1, 2)
    radius_range: tuple[float, float] = (2.0, 3.0)
    intensity_delta: float = 0.4
    softness_sigma: float = 0.5
    placement: str = "gap"
    min_separation: float = 8.0
    with_references: bool = True
    ref_max_shift: int = 4
    seed: int = 0

    def validate(self):
        if min(self.n_train, self.n_test, self.n_holdout) < 0:
            raise ParameterError("split sizes must be >= 0")
        if self.placement not in ("gap", "any"):
            raise ParameterError(f"placement must be 'gap' or 'any', got {self.placement!r}")
        lo, hi = self.defects_per_image
        if not 0 <= lo <= hi:
            raise ParameterError("defects_per_image must be an ordered pair of counts")
        if not 0 < self.radius_range[0] <= self.radius_range[1]:
            raise ParameterError("radius_range must be an ordered pair of positive radii")
        return self

    @classmethod
    def from_dict(cls, data):
        from .pipeline.config import build_dataclass

        return build_dataclass(cls, data)


def sample_pattern_spec(cfg: DatasetConfig, rng: np.random.Generator) -> PatternSpec:
    period = int(rng.choice(cfg.periods))
    jit = cfg.level_jitter
    return PatternSpec(
        width=cfg.image_size,
        height=cfg.image_size,
        line_period=period,
        line_width=max(1, int(round(period * cfg.fill_fraction))),
        orientation=str(rng.choice(cfg.orientations)),
        fg_level=float(np.clip(cfg.fg_level + rng.uniform(-jit, jit), 0.0, 1.0)),
        bg_level=float(np.clip(cfg.bg_level + rng.uniform(-jit, jit), 0.0, 1.0)),
        noise_sigma=cfg.noise_sigma,
        edge_blur_sigma=cfg.edge_blur_sigma,
        phase=float(rng.integers(0, period)),
        edge_roughness=cfg.edge_roughness,
    ).validate()


def sample_defects(cfg: DatasetConfig, spec: PatternSpec, rng: np.random.Generator) -> list[DefectSpec]:
    """Random particles, placed between lines unless ``placement == 'any'``."""
    n = int(rng.integers(cfg.defects_per_image[0], cfg.defects_per_image[1] + 1))
    shape = (spec.height, spec.width)
    out: list[DefectSpec] = []
    for _ in range(200 * max(n, 1)):
        if len(out) == n:
            break
        radius = float(rng.uniform(*cfg.radius_range))
        probe = DefectSpec(radius=radius, softness_sigma=cfg.softness_sigma)
        margin = probe.extent + 1.0
        along = float(rng.uniform(margin, (spec.height if spec.orientation == "vertical" else spec.width) - 1 - margin))
        across_len = spec.width if spec.orientation == "vertical" else spec.height
        if cfg.placement == "gap":
            gap = spec.line_period - spec.line_width
            # pixel-centre coordinate of the gap middle
            centres = spec.phase + spec.line_width + gap / 2.0 - 0.5 + spec.line_period * np.arange(-1, across_len // spec.line_period + 2)
            centres = centres[(centres >= margin) & (centres <= across_len - 1 - margin)]
            if centres.size == 0:
                continue
            across = float(rng.choice(centres))
        else:
            across = float(rng.uniform(margin, across_len - 1 - margin))
        center = (along, across) if spec.orientation == "vertical" else (across, along)
        cand = replace(probe, center=center, intensity_delta=cfg.intensity_delta)
        if all(math.dist(cand.center, o.center) > cand.extent + o.extent + cfg.min_separation for o in out):
            out.append(cand.validate(shape))
    return out


def _save_png(path: Path, arr: np.ndarray):
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def _save_mask(path: Path, labels: np.ndarray):
    Image.fromarray((labels > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def load_mask(path) -> np.ndarray:
    return (np.asarray(Image.open(path)) > 127).astype(np.uint8)


def make_reference(spec: PatternSpec, seed: int, noise_seed: int, shift: tuple[int, int]) -> np.ndarray:
    """Clean capture of the same location on another die, circularly offset by ``shift``."""
    ref = gen_background(spec, seed, noise_seed=noise_seed).pixels
    return np.roll(ref, shift, axis=(0, 1))


def gen_dataset(cfg: DatasetConfig, out_dir) -> dict:
    """Write train/test/holdout splits under ``out_dir`` and return the manifest.

    Image paths in the manifest are relative to ``out_dir``. The manifest is
    also written to ``out_dir/manifest.json``.
    """
    cfg.validate()
    out = Path(out_dir)
    for sub in ("train", "test", "holdout"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    records = []
    split_sizes = {"train": cfg.n_train, "test": cfg.n_test, "holdout": cfg.n_holdout}
    for split_idx, (split, n) in enumerate(split_sizes.items()):
        for i in range(n):
            seed = int(np.random.SeedSequence([cfg.seed, split_idx, i]).generate_state(1)[0])
            rng = np.random.default_rng(seed)
            spec = sample_pattern_spec(cfg, rng)
            bg = gen_background(spec, seed)
            rec = {"split": split, "seed": seed, "spec": {"pattern": asdict(spec)}}
            stem = f"{split}/{i:04d}"
            if split == "test":
                defects = sample_defects(cfg, spec, rng)
                img, labels = bg.pixels, np.zeros(bg.shape, np.uint8)
                for d in defects:
                    img_i, m = implant_defect(img, d)
                    img, labels = img_i.pixels, labels | m.labels
                _save_png(out / f"{stem}_img.png", img)
                _save_mask(out / f"{stem}_mask.png", labels)
                rec["mask_path"] = f"{stem}_mask.png"
                rec["spec"]["defects"] = [asdict(d) for d in defects]
            else:
                _save_png(out / f"{stem}_img.png", bg.pixels)
            rec["image_path"] = f"{stem}_img.png"
            if cfg.with_references:
                m = cfg.ref_max_shift
                shift = (int(rng.integers(-m, m + 1)), int(rng.integers(-m, m + 1)))
                ref = make_reference(spec, seed, noise_seed=seed + 1, shift=shift)
                _save_png(out / f"{stem}_ref.png", ref)
                rec["reference_path"] = f"{stem}_ref.png"
                rec["spec"]["ref_shift"] = list(shift)
            records.append(rec)

    manifest = {"version": 1, "config": _jsonable(asdict(cfg)), "records": records}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def _jsonable(obj):
    return json.loads(json.dumps(obj))


def load_manifest(path) -> dict:
    """Read a manifest, resolving relative paths against its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["root"] = str(path.parent)
    return manifest


def resolve(manifest: dict, rel: str) -> Path:
    return Path(manifest["root"]) / rel


def manifest_digest(out_dir) -> str:
    """SHA-256 over the manifest and every file it lists."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    h = hashlib.sha256((out / "manifest.json").read_bytes())
    for rec in manifest["records"]:
        for key in ("image_path", "mask_path", "reference_path"):
            if key in rec:
                h.update((out / rec[key]).read_bytes())
    return h.hexdigest()


def pattern_spec_from_dict(d: dict) -> PatternSpec:
    return PatternSpec(**d)


def defect_spec_from_dict(d: dict) -> DefectSpec:
    d = dict(d)
    d["center"] = tuple(d["center"])
    return DefectSpec(**d)


__all__ = [
    "PatternSpec",
    "DefectSpec",
    "SemImage",
    "DefectMask",
    "DatasetConfig",
    "gen_background",
    "render_pattern",
    "implant_defect",
    "defect_profile",
    "gen_dataset",
    "load_manifest",
    "manifest_digest",
]
