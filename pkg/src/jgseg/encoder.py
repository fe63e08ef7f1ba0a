"""Pyramid encoder E: image -> W+.

Four stride-2 stages feed a top-down feature pyramid. Generator level ``i``
(coarse to fine) reads pyramid stage ``n_stages - 1 - i`` (clamped), so the
two coarsest style sites come from the deepest features. Each head pools its
pyramid map to at most 4x4, keeping coarse position information, and predicts
the offsets of its two sites from the generator's mean style.
"""
from __future__ import annotations

from typing import List

import torch
import torch.nn.functional as F
from torch import nn

from .core import seeded_init
from .errors import InvalidArgument


class Stage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.down = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
        self.conv = nn.Conv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return F.leaky_relu(self.conv(F.leaky_relu(self.down(x), 0.2)), 0.2)


class SiteHead(nn.Module):
    def __init__(self, channels: int, pooled: int, n_sites: int, d_w: int):
        super().__init__()
        self.pooled = pooled
        self.n_sites = n_sites
        self.d_w = d_w
        self.fc = nn.Linear(channels * pooled * pooled, n_sites * d_w)

    def forward(self, f):
        f = F.adaptive_avg_pool2d(f, self.pooled)
        return self.fc(f.flatten(1)).view(-1, self.n_sites, self.d_w)


class Encoder(nn.Module):
    def __init__(self, resolution: int, c_img: int, n_levels: int, d_w: int,
                 channels: List[int] = (32, 64, 128, 128), fpn_channels: int = 64):
        super().__init__()
        self.resolution = resolution
        self.c_img = c_img
        self.n_levels = n_levels
        self.d_w = d_w
        chans = [c_img] + list(channels)
        self.stages = nn.ModuleList(Stage(chans[i], chans[i + 1]) for i in range(len(channels)))
        self.lateral = nn.ModuleList(nn.Conv2d(c, fpn_channels, 1) for c in channels)
        n_st = len(channels)
        self.route = [max(n_st - 1 - i, 0) for i in range(n_levels)]
        heads = []
        for i in range(n_levels):
            size = max(resolution >> (self.route[i] + 1), 1)
            heads.append(SiteHead(fpn_channels, min(4, size), 2, d_w))
        self.heads = nn.ModuleList(heads)
        self.register_buffer("w_avg", torch.zeros(d_w))

    @property
    def n_styles(self) -> int:
        return 2 * self.n_levels

    def forward(self, x):
        if x.shape[-3:] != (self.c_img, self.resolution, self.resolution):
            raise InvalidArgument(f"encoder expects [*, {self.c_img}, {self.resolution}, {self.resolution}], "
                                  f"got {tuple(x.shape)}")
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        feats = []
        h = x
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        pyramid = [None] * len(feats)
        top = None
        for i in reversed(range(len(feats))):
            lat = self.lateral[i](feats[i])
            top = lat if top is None else lat + F.interpolate(top, size=lat.shape[-2:], mode="nearest")
            pyramid[i] = top
        rows = [head(pyramid[self.route[i]]) for i, head in enumerate(self.heads)]
        out = torch.cat(rows, dim=1) + self.w_avg
        return out[0] if single else out


def encode(E: Encoder, x):
    return E(x)


def build_encoder(resolution: int, c_img: int, n_levels: int, d_w: int, enc_cfg, seed: int = 0) -> Encoder:
    with seeded_init(seed):
        return Encoder(resolution, c_img, n_levels, d_w, enc_cfg.channels, enc_cfg.fpn_channels)
