"""U-net segmenter with a sigmoid segmentation head and a 1x1 embedding head."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError

PROB_EPS = 1e-6


@dataclass(frozen=True)
class NetConfig:
    depth: int = 4
    base_channels: int = 32
    embed_dim: int = 64
    in_channels: int = 1
    embed_source: str = "high"  # "high" or "low"
    groups: int = 8

    def validate(self):
        if self.depth < 2:
            raise ParameterError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 8:
            raise ParameterError(f"base_channels must be >= 8, got {self.base_channels}")
        if self.embed_dim < 1 or self.in_channels < 1:
            raise ParameterError("embed_dim and in_channels must be positive")
        if self.embed_source not in ("high", "low"):
            raise ParameterError(f"embed_source must be 'high' or 'low', got {self.embed_source!r}")
        if self.base_channels % self.groups:
            raise ParameterError("base_channels must be divisible by groups")
        return self

    @property
    def divisor(self):
        return 2 ** (self.depth - 1)

    def channels(self, level):
        return self.base_channels * 2**level


class ForwardOutput(NamedTuple):
    low_feats: torch.Tensor
    high_feats: torch.Tensor
    prob_map: torch.Tensor


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, groups):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.GroupNorm(min(groups, cout), cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.GroupNorm(min(groups, cout), cout),
            nn.ReLU(inplace=True),
        )


class UNet(nn.Module):
    """Encoder-decoder with concatenated skips.

    GroupNorm keeps every statistic per sample, so a sample's output does
    not depend on what else is in the batch.
    """

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg.validate()
        g = cfg.groups
        self.enc = nn.ModuleList()
        cin = cfg.in_channels
        for lvl in range(cfg.depth):
            self.enc.append(ConvBlock(cin, cfg.channels(lvl), g))
            cin = cfg.channels(lvl)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for lvl in reversed(range(cfg.depth - 1)):
            self.up.append(nn.ConvTranspose2d(cfg.channels(lvl + 1), cfg.channels(lvl), 2, stride=2))
            self.dec.append(ConvBlock(2 * cfg.channels(lvl), cfg.channels(lvl), g))
        self.seg_head = nn.Conv2d(cfg.base_channels, 1, 1)
        src = cfg.base_channels if cfg.embed_source == "high" else cfg.channels(cfg.depth - 1)
        self.proj = nn.Conv2d(src, cfg.embed_dim, 1)

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected input (B, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}")
        d = self.cfg.divisor
        if x.shape[-2] % d or x.shape[-1] % d:
            raise ShapeError(
                f"input H, W must be divisible by 2^(depth-1) = {d}, got {tuple(x.shape[-2:])}"
            )

    def forward(self, x) -> ForwardOutput:
        self.check_input(x)
        skips = []
        h = x
        for i, block in enumerate(self.enc):
            if i:
                h = F.max_pool2d(h, 2)
            h = block(h)
            skips.append(h)
        low = h
        for up, block, skip in zip(self.up, self.dec, reversed(skips[:-1])):
            h = block(torch.cat([up(h), skip], dim=1))
        prob = torch.sigmoid(self.seg_head(h)).clamp(PROB_EPS, 1.0 - PROB_EPS)
        return ForwardOutput(low, h, prob)

    def project(self, feats) -> torch.Tensor:
        """Per-pixel linear map of features to the embedding space."""
        return self.proj(feats)

    def embed_features(self, out: ForwardOutput) -> torch.Tensor:
        return out.high_feats if self.cfg.embed_source == "high" else out.low_feats


def build_pair(cfg: NetConfig, seed: int) -> tuple[UNet, UNet]:
    """Student and teacher with the same architecture and independent initial weights."""
    torch.manual_seed(seed)
    student = UNet(cfg)
    torch.manual_seed(seed + 7919)
    teacher = UNet(cfg)
    return student, teacher


def save_checkpoint(path, model: UNet, extra=None):
    torch.save({"format": "semdefect-unet/1", "config": asdict(model.cfg), "state": model.state_dict(), "extra": extra or {}}, path)


def load_checkpoint(path) -> tuple[UNet, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != "semdefect-unet/1":
        raise ParameterError(f"{path} is not a segmentation checkpoint")
    model = UNet(NetConfig(**blob["config"]))
    try:
        model.load_state_dict(blob["state"], strict=True)
    except RuntimeError as exc:
        raise ShapeError(f"checkpoint parameters disagree with its config: {exc}") from exc
    model.eval()
    return model, blob["extra"]
