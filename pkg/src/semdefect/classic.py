"""Reference-vs-defect baseline: phase correlation, difference threshold, blobs."""

from __future__ import annotations

import numpy as np

from .detect import connected_components, fit_ellipse
from .errors import DegenerateInputError, ShapeError
from .simgen import _as_pixels

MAD_TO_SIGMA = 1.4826


def _wrap(s, n):
    s = int(s) % n
    return s - n if s >= n - n // 2 else s


def cross_power_surface(ref, moved, lowpass_sigma=0.0) -> np.ndarray:
    """Inverse FFT of the normalized cross-power spectrum of two images.

    ``lowpass_sigma > 0`` tapers the normalized spectrum with a Gaussian,
    which smooths the surface by that many pixels and damps the
    noise-dominated high frequencies that whitening otherwise amplifies.
    """
    a = _as_pixels(ref)
    b = _as_pixels(moved)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    for name, im in (("reference", a), ("defect", b)):
        if np.ptp(im) == 0:
            raise DegenerateInputError(f"{name} image is constant; cross-power normalization is undefined")
    fa = np.fft.fft2(a - a.mean())
    fb = np.fft.fft2(b - b.mean())
    cross = np.conj(fa) * fb
    mag = np.abs(cross)
    keep = mag > mag.max() * 1e-12
    r = np.zeros_like(cross)
    r[keep] = cross[keep] / mag[keep]
    if lowpass_sigma > 0:
        fy = np.fft.fftfreq(a.shape[0])[:, None]
        fx = np.fft.fftfreq(a.shape[1])[None, :]
        r *= np.exp(-2.0 * (np.pi * lowpass_sigma) ** 2 * (fy**2 + fx**2))
    return np.fft.ifft2(r).real


def phase_correlate(ref, moved, lowpass_sigma=0.0) -> tuple[int, int]:
    """Integer circular shift ``s`` with ``moved ~= np.roll(ref, s, axis=(0, 1))``.

    Each component is reported in ``[-n/2, n/2)``.
    """
    surf = cross_power_surface(ref, moved, lowpass_sigma)
    h, w = surf.shape
    dy, dx = np.unravel_index(int(np.argmax(surf)), surf.shape)
    return _wrap(dy, h), _wrap(dx, w)


def register(ref, shift) -> np.ndarray:
    """Circularly shift ``ref`` by ``shift`` so it lines up with the moved image."""
    return np.roll(_as_pixels(ref), (int(shift[0]), int(shift[1])), axis=(0, 1))


def robust_threshold(d, k_sigma):
    med = float(np.median(d))
    sigma = MAD_TO_SIGMA * float(np.median(np.abs(d - med)))
    return med + k_sigma * sigma


def diff_detect(aligned_ref, moved, k_sigma=5.0, min_area=4, *, keep_filtered=False):
    """Detect blobs in ``|moved - aligned_ref|`` above a median + k*MAD threshold.

    Scores squash the blob's mean difference ``m`` relative to the threshold
    ``t`` as ``r / (1 + r)`` with ``r = m / t``, so they are monotone in ``m``
    and lie in (0.5, 1) for every kept blob.
    """
    a = _as_pixels(aligned_ref)
    b = _as_pixels(moved)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    d = np.abs(b - a)
    t = robust_threshold(d, k_sigma)
    fg = d > t
    kept, filtered = [], []
    for blob in connected_components(fg):
        det = fit_ellipse(blob, d)
        ratio = det.score / max(t, 1e-6)
        det.score = ratio / (1.0 + ratio)
        if blob.area < min_area:
            det.filtered = True
            filtered.append(det)
        else:
            kept.append(det)
    if keep_filtered:
        return kept, filtered
    return kept


def baseline(ref, moved, k_sigma=5.0, min_area=4, lowpass_sigma=1.0, *, keep_filtered=False):
    """Register ``ref`` onto ``moved`` and run :func:`diff_detect`."""
    shift = phase_correlate(ref, moved, lowpass_sigma)
    return diff_detect(register(ref, shift), moved, k_sigma, min_area, keep_filtered=keep_filtered)


__all__ = ["phase_correlate", "register", "diff_detect", "baseline", "cross_power_surface"]
