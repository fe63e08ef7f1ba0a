"""Joint image/label style generator.

Mapping network z -> w, a learned constant at the base resolution, and per
level two style-modulated 3x3 convolutions. Every level owns a tImage head
(1x1 conv to image channels) and a tSeg head (1x1 conv to class logits); the
final image and logits are nearest-upsample-and-sum skip accumulations of the
per-level head outputs. Style sites are the convolutions, so a W+ code has
``2 * n_levels`` rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import RunConfig, default_channels
from .core import SeededRng, normal_sample, seeded_init
from .errors import InvalidArgument
from .layers import EqualizedConv2d, EqualizedLinear, lrelu, upsample


@dataclass
class GeneratorConfig:
    resolution: int = 64
    channels: Optional[List[int]] = None
    d_z: int = 64
    d_w: int = 128
    mapping_layers: int = 4
    mapping_width: int = 128
    mapping_lr_mul: float = 0.01
    c_cls: int = 2
    c_img: int = 1
    noise: bool = True
    base_resolution: int = 4

    def __post_init__(self):
        r = self.resolution
        if r < 8 or r & (r - 1):
            raise InvalidArgument(f"resolution must be a power of two >= 8, got {r}")
        if self.channels is None:
            self.channels = default_channels(r, self.base_resolution)
        if len(self.channels) != self.n_levels:
            raise InvalidArgument(f"need {self.n_levels} channel entries, got {len(self.channels)}")
        if any(c <= 0 for c in self.channels):
            raise InvalidArgument("channel schedule must be positive")

    @property
    def n_levels(self) -> int:
        return int(math.log2(self.resolution // self.base_resolution)) + 1

    @property
    def n_styles(self) -> int:
        return 2 * self.n_levels

    @classmethod
    def from_run(cls, cfg: RunConfig, c_img: int, c_cls: int) -> "GeneratorConfig":
        g = cfg.gen
        return cls(resolution=cfg.data.resolution, channels=g.channels, d_z=g.d_z, d_w=g.d_w,
                   mapping_layers=g.mapping_layers, mapping_width=g.mapping_width,
                   mapping_lr_mul=g.mapping_lr_mul, c_cls=c_cls, c_img=c_img, noise=g.noise,
                   base_resolution=g.base_resolution)


class MappingNetwork(nn.Module):
    def __init__(self, d_z: int, d_w: int, n_layers: int, width: int, lr_mul: float):
        super().__init__()
        dims = [d_z] + [width] * (n_layers - 1) + [d_w]
        self.layers = nn.ModuleList(
            EqualizedLinear(dims[i], dims[i + 1], lr_mul=lr_mul) for i in range(n_layers)
        )

    def forward(self, z):
        x = z * torch.rsqrt(z.pow(2).mean(dim=-1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = lrelu(layer(x))
        return x


class StyleConv(nn.Module):
    """3x3 conv with per-input-channel style scales and demodulation.

    Equivalent to a modulated/demodulated convolution but implemented by
    scaling activations, so one ordinary conv serves the whole batch.
    """

    def __init__(self, in_ch: int, out_ch: int, d_w: int, up: bool):
        super().__init__()
        self.affine = EqualizedLinear(d_w, in_ch, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, 3, 3))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.noise_strength = nn.Parameter(torch.zeros(out_ch))
        self.scale = 1.0 / math.sqrt(in_ch * 9)
        self.up = up

    def forward(self, x, w, noise=None):
        s = self.affine(w)
        if self.up:
            x = upsample(x)
        weight = self.weight * self.scale
        x = F.conv2d(x * s[:, :, None, None], weight, padding=1)
        demod = torch.rsqrt((weight.pow(2).sum(dim=(2, 3))[None] * s.pow(2)[:, None, :]).sum(dim=2) + 1e-8)
        x = x * demod[:, :, None, None]
        if noise is not None:
            x = x + noise * self.noise_strength[None, :, None, None]
        return lrelu(x + self.bias[None, :, None, None])


class Level(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, d_w: int, first: bool):
        super().__init__()
        self.conv0 = StyleConv(in_ch, out_ch, d_w, up=not first)
        self.conv1 = StyleConv(out_ch, out_ch, d_w, up=False)


class JointGenerator(nn.Module):
    """G: z -> w -> (image, mask logits)."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.mapping = MappingNetwork(cfg.d_z, cfg.d_w, cfg.mapping_layers, cfg.mapping_width, cfg.mapping_lr_mul)
        self.const = nn.Parameter(torch.randn(ch[0], cfg.base_resolution, cfg.base_resolution))
        self.levels = nn.ModuleList(
            Level(ch[max(i - 1, 0)], ch[i], cfg.d_w, first=(i == 0)) for i in range(cfg.n_levels)
        )
        self.heads_img = nn.ModuleList(EqualizedConv2d(c, cfg.c_img, 1) for c in ch)
        self.heads_seg = nn.ModuleList(EqualizedConv2d(c, cfg.c_cls, 1) for c in ch)
        self.register_buffer("w_avg", torch.zeros(cfg.d_w))

    @property
    def n_styles(self) -> int:
        return self.cfg.n_styles

    @staticmethod
    def group_of(name: str) -> str:
        if name.startswith("mapping."):
            return "G.mapping"
        if name.startswith("heads_img."):
            return "G.tImage"
        if name.startswith("heads_seg."):
            return "G.tSeg"
        return "G.shared"

    def params_in(self, group: str):
        return [p for n, p in self.named_parameters() if self.group_of(n) == group]

    # -- latent side -------------------------------------------------------
    def map_latent(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.cfg.d_z:
            raise InvalidArgument(f"latent must have length {self.cfg.d_z}, got {z.shape[-1]}")
        return self.mapping(z)

    def mean_style(self, n: int, rng: SeededRng, chunk: int = 1000) -> torch.Tensor:
        if n < 1:
            raise InvalidArgument("mean_style needs n >= 1")
        total = torch.zeros(self.cfg.d_w, dtype=torch.float64)
        done = 0
        with torch.no_grad():
            while done < n:
                b = min(chunk, n - done)
                total += self.map_latent(normal_sample(rng, (b, self.cfg.d_z))).double().sum(0)
                done += b
        return (total / n).float()

    def broadcast(self, w: torch.Tensor) -> torch.Tensor:
        return w.unsqueeze(-2).expand(*w.shape[:-1], self.n_styles, w.shape[-1])

    # -- synthesis ---------------------------------------------------------
    def _noise(self, mode: str, rng: Optional[SeededRng], batch: int):
        if not self.cfg.noise or mode == "zero":
            return [None] * self.n_styles
        if mode == "fixed":
            rng = rng if rng is not None else SeededRng(0, "noise")
        elif mode != "fresh":
            raise InvalidArgument(f"unknown noise mode {mode!r}")
        if rng is None:
            raise InvalidArgument("noise_mode='fresh' needs an rng")
        out = []
        res = self.cfg.base_resolution
        for _ in range(self.cfg.n_levels):
            out += [normal_sample(rng, (batch, 1, res, res)) for _ in range(2)]
            res *= 2
        return out

    def synthesize(self, ws: torch.Tensor, noise_mode: str = "zero", rng: Optional[SeededRng] = None,
                   noise_seed: Optional[int] = None, return_levels: bool = False):
        """W+ codes ``[B, L, d_w]`` (or ``[L, d_w]``) -> image, mask logits.

        ``noise_mode`` is ``"zero"``, ``"fresh"`` (draws from ``rng``) or
        ``"fixed"`` (a fresh stream seeded by ``noise_seed``).
        """
        single = ws.dim() == 2
        if single:
            ws = ws.unsqueeze(0)
        if ws.dim() != 3 or ws.shape[1] != self.n_styles or ws.shape[2] != self.cfg.d_w:
            raise InvalidArgument(f"W+ code must be [B, {self.n_styles}, {self.cfg.d_w}], got {tuple(ws.shape)}")
        if noise_mode == "fixed":
            rng = SeededRng(noise_seed or 0, "noise")
        noises = self._noise(noise_mode, rng, ws.shape[0])
        x = self.const.unsqueeze(0).expand(ws.shape[0], -1, -1, -1)
        img = seg = None
        parts = []
        for i, level in enumerate(self.levels):
            x = level.conv0(x, ws[:, 2 * i], noises[2 * i])
            x = level.conv1(x, ws[:, 2 * i + 1], noises[2 * i + 1])
            part_img = self.heads_img[i](x)
            part_seg = self.heads_seg[i](x)
            parts.append((part_img, part_seg))
            img = part_img if img is None else upsample(img) + part_img
            seg = part_seg if seg is None else upsample(seg) + part_seg
        if single:
            img, seg = img[0], seg[0]
        if return_levels:
            return img, seg, parts
        return img, seg

    def forward(self, z, psi: float = 1.0, noise_mode: str = "zero", rng=None):
        w = self.map_latent(z)
        if psi != 1.0:
            w = truncate(w, self.w_avg, psi)
        return self.synthesize(self.broadcast(w), noise_mode=noise_mode, rng=rng)


def truncate(w: torch.Tensor, w_avg: torch.Tensor, psi: float) -> torch.Tensor:
    if not 0.0 <= psi <= 1.0:
        raise InvalidArgument(f"truncation factor must lie in [0, 1], got {psi}")
    return w_avg + psi * (w - w_avg)


@torch.no_grad()
def sample_pairs(G: JointGenerator, n: int, psi: float, rng: SeededRng, batch: int = 64,
                 noise_mode: str = "zero") -> List[Tuple[np.ndarray, np.ndarray]]:
    """Draw ``n`` (image, label map) pairs; labels are the per-pixel argmax."""
    pairs = []
    done = 0
    while done < n:
        b = min(batch, n - done)
        z = normal_sample(rng, (b, G.cfg.d_z))
        w = G.map_latent(z)
        if psi != 1.0:
            w = truncate(w, G.w_avg, psi)
        img, logits = G.synthesize(G.broadcast(w), noise_mode=noise_mode, rng=rng)
        labels = logits.argmax(dim=1)
        for j in range(b):
            pairs.append((img[j].numpy(), labels[j].numpy().astype(np.uint8)))
        done += b
    return pairs


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> JointGenerator:
    with seeded_init(seed):
        return JointGenerator(cfg)
