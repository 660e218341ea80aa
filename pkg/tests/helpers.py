"""Shared fixtures for registration tests."""

import math

import numpy as np
import torch

from semdefect.simgen import PatternSpec, gen_background


def shifted_pair(rng, index, size=64, noise_sigma=0.0, max_shift=20):
    """Reference and circularly shifted copy of one line pattern.

    With noise, the two images carry independent noise draws over the
    same geometry, as two acquisitions of the same die would.
    """
    spec = PatternSpec(
        width=size, height=size,
        line_period=int(rng.choice([12, 16])), line_width=6,
        orientation=str(rng.choice(["vertical", "horizontal"])),
        edge_roughness=0.6, noise_sigma=noise_sigma,
    )
    shift = tuple(int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    ref = gen_background(spec, seed=index).pixels
    moved = np.roll(gen_background(spec, seed=index, noise_seed=10_000 + index).pixels, shift, axis=(0, 1))
    return ref, moved, shift


def brute_force_shift(ref, moved):
    """Argmax over every circular shift of the plain cross-correlation sum."""
    a = ref - ref.mean()
    b = moved - moved.mean()
    h, w = a.shape
    # windows[i, j] == np.roll(a, (-i, -j), axis=(0, 1)); shift s pairs with window -s
    windows = np.lib.stride_tricks.sliding_window_view(np.tile(a, (2, 2)), (h, w))[:h, :w]
    corr = np.einsum("ijkl,kl->ij", windows, b)
    corr = np.roll(corr[::-1, ::-1], 1, axis=(0, 1))
    dy, dx = np.unravel_index(int(np.argmax(corr)), corr.shape)
    return (dy + h // 2) % h - h // 2, (dx + w // 2) % w - w // 2


def clr_oracle(x, a, tau, include_positive=True):
    """Double loop over every pixel of every image; negatives from other images only."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    B, C = x.shape[:2]
    xs = x.reshape(B, C, -1)
    as_ = a.reshape(B, C, -1)
    P = xs.shape[-1]

    def cos(u, v):
        nu, nv = math.sqrt(sum(t * t for t in u)), math.sqrt(sum(t * t for t in v))
        if nu == 0 or nv == 0:
            return 0.0
        return sum(p * q for p, q in zip(u, v)) / (nu * nv)

    losses = []
    for b in range(B):
        for i in range(P):
            anchor = xs[b, :, i]
            pos = math.exp(cos(anchor, as_[b, :, i]) / tau)
            den = pos if include_positive else 0.0
            for b2 in range(B):
                if b2 == b:
                    continue
                for j in range(P):
                    den += math.exp(cos(anchor, as_[b2, :, j]) / tau)
            losses.append(-math.log(pos / den))
    return sum(losses) / len(losses)


def central_diff(f, x, h=1e-6):
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gf = x.view(-1), g.view(-1)
    for k in range(flat.numel()):
        orig = flat[k].item()
        flat[k] = orig + h
        up = f(x).item()
        flat[k] = orig - h
        down = f(x).item()
        flat[k] = orig
        gf[k] = (up - down) / (2 * h)
    return g


def autograd(f, x):
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    return x.grad


def rel_err(a, b):
    return float(torch.linalg.norm(a - b) / max(float(torch.linalg.norm(b)), 1e-12))


# criterion number -> (passed, detail); printed at the end of the session
ACCEPTANCE = {}


def record(number, name, passed, detail):
    ACCEPTANCE[str(number)] = (name, bool(passed), detail)
    print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return passed
