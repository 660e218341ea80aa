"""Segmentation and semi-supervised objectives.

All losses take probabilities (not logits) and clamp them to
``[eps, 1 - eps]`` before taking logs, so they stay finite for any input.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ParameterError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    clamp_eps: float = 1e-6
    pixel_sample_budget: int = 64
    include_positive: bool = True
    lambda_bce: float = 1.0
    lambda_clr: float = 0.1
    lambda_cons: float = 0.1

    def validate(self):
        if not self.tau > 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if not 0 < self.clamp_eps < 0.5:
            raise ParameterError(f"clamp_eps must lie in (0, 0.5), got {self.clamp_eps}")
        if self.pixel_sample_budget < 1:
            raise ParameterError("pixel_sample_budget must be >= 1")
        if min(self.lambda_bce, self.lambda_clr, self.lambda_cons) < 0:
            raise ParameterError("loss mixing coefficients must be >= 0")
        return self


def _t(x):
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def _same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def cosine_sim(a, b, dim=-1):
    """Cosine similarity along ``dim``; a zero vector has similarity 0 with anything."""
    a, b = _t(a), _t(b)
    return (F.normalize(a, dim=dim) * F.normalize(b, dim=dim)).sum(dim)


def _bce(p, q, eps):
    """Elementwise cross-entropy ``-p log q - (1-p) log(1-q)``, ``q`` clamped."""
    q = q.clamp(eps, 1.0 - eps)
    return -(p * torch.log(q) + (1.0 - p) * torch.log1p(-q))


def weighted_bce(prob, mask, weights, eps=1e-6):
    """Pixel-averaged, per-pixel weighted binary cross-entropy."""
    prob, mask, weights = _t(prob), _t(mask), _t(weights)
    _same_shape(prob, mask, "weighted_bce prob/mask")
    _same_shape(prob, weights, "weighted_bce prob/weights")
    mask = mask.to(prob.dtype)
    return (weights.to(prob.dtype) * _bce(mask, prob, eps)).mean()


def consistency(p1, p2, eps=1e-6, stop_grad=True):
    """Symmetric cross-entropy between two probability maps.

    ``p2`` is treated as the teacher: with ``stop_grad`` no gradient flows
    into it. The value is symmetric in its arguments either way.
    """
    p1, p2 = _t(p1), _t(p2)
    _same_shape(p1, p2, "consistency")
    p1 = p1.clamp(eps, 1.0 - eps)
    p2 = p2.clamp(eps, 1.0 - eps)
    if stop_grad:
        p2 = p2.detach()
    return (_bce(p1, p2, eps) + _bce(p2, p1, eps)).mean()


def sample_pixels(n_pix, budget, n_images, generator):
    """Per-image pixel indices, ``(n_images, k)``; all pixels when the budget covers them."""
    if budget >= n_pix:
        return torch.arange(n_pix).expand(n_images, n_pix)
    return torch.stack([torch.randperm(n_pix, generator=generator)[:budget] for _ in range(n_images)])


def dense_clr(embeds, aug_embeds, cfg: LossConfig = LossConfig(), seed=0):
    """Dense InfoNCE between pixel embeddings and their augmented counterparts.

    ``embeds`` and ``aug_embeds`` are ``(B, C, H, W)`` and spatially aligned.
    Each sampled pixel is pulled towards the same pixel of the augmented
    view and pushed away from the augmented embeddings of the pixels sampled
    in the other images of the batch. Same-image pixels are never negatives.
    """
    embeds, aug_embeds = _t(embeds), _t(aug_embeds)
    _same_shape(embeds, aug_embeds, "dense_clr")
    if embeds.ndim == 3:
        embeds, aug_embeds = embeds.unsqueeze(-1), aug_embeds.unsqueeze(-1)
    B, C = embeds.shape[:2]
    if B < 2:
        raise ConfigError("dense contrastive loss requires >=2 samples per batch")
    gen = torch.Generator().manual_seed(int(seed))
    flat = embeds.reshape(B, C, -1)
    flat_aug = aug_embeds.reshape(B, C, -1)
    idx = sample_pixels(flat.shape[-1], cfg.pixel_sample_budget, B, gen)
    k = idx.shape[1]
    gather = idx.unsqueeze(1).expand(B, C, k)
    x = F.normalize(torch.gather(flat, 2, gather), dim=1).permute(0, 2, 1).reshape(B * k, C)
    a = F.normalize(torch.gather(flat_aug, 2, gather), dim=1).permute(0, 2, 1).reshape(B * k, C)
    logits = x @ a.T / cfg.tau
    owner = torch.arange(B).repeat_interleave(k)
    other = owner[:, None] != owner[None, :]
    pos = torch.diagonal(logits)
    allowed = other | torch.eye(B * k, dtype=torch.bool) if cfg.include_positive else other
    denom = torch.logsumexp(logits.masked_fill(~allowed, float("-inf")), dim=1)
    return (denom - pos).mean()


def total_loss(outputs: dict, targets: dict, cfg: LossConfig, seed=0):
    """Weighted sum of the enabled terms and a per-term breakdown.

    ``outputs`` may hold ``prob``, ``embeds``, ``aug_embeds`` and
    ``teacher_prob``; ``targets`` holds ``mask`` and ``weights``. A term with
    a zero coefficient is skipped and reported as 0.
    """
    needs = {
        "bce": (cfg.lambda_bce, [("outputs", "prob"), ("targets", "mask"), ("targets", "weights")]),
        "clr": (cfg.lambda_clr, [("outputs", "embeds"), ("outputs", "aug_embeds")]),
        "cons": (cfg.lambda_cons, [("outputs", "prob"), ("outputs", "teacher_prob")]),
    }
    src = {"outputs": outputs, "targets": targets}
    for term, (lam, keys) in needs.items():
        if lam > 0:
            missing = [f"{where}.{key}" for where, key in keys if src[where].get(key) is None]
            if missing:
                raise ConfigError(f"loss term '{term}' is enabled but missing {', '.join(missing)}")

    breakdown = {}
    total = torch.zeros((), dtype=torch.float64)
    if cfg.lambda_bce > 0:
        breakdown["bce"] = weighted_bce(outputs["prob"], targets["mask"], targets["weights"], cfg.clamp_eps)
    if cfg.lambda_clr > 0:
        breakdown["clr"] = dense_clr(outputs["embeds"], outputs["aug_embeds"], cfg, seed)
    if cfg.lambda_cons > 0:
        breakdown["cons"] = consistency(outputs["prob"], outputs["teacher_prob"], cfg.clamp_eps)
    lams = {"bce": cfg.lambda_bce, "clr": cfg.lambda_clr, "cons": cfg.lambda_cons}
    for term, value in breakdown.items():
        total = total.to(value.dtype) + lams[term] * value
    for term in lams:
        breakdown.setdefault(term, torch.zeros(()))
    return total, breakdown
