"""Image critic D_r and the multi-scale patch critic D_m on image/mask pairs."""
from __future__ import annotations

import math
from typing import List, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .core import seeded_init
from .errors import InvalidArgument
from .layers import EqualizedConv2d, EqualizedLinear, downsample, lrelu


class ResBlockDown(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv0 = EqualizedConv2d(in_ch, in_ch, 3, padding=1)
        self.conv1 = EqualizedConv2d(in_ch, out_ch, 3, padding=1)
        self.skip = EqualizedConv2d(in_ch, out_ch, 1, bias=False)

    def forward(self, x):
        y = lrelu(self.conv0(x))
        y = lrelu(self.conv1(downsample(y)))
        return (y + self.skip(downsample(x))) / math.sqrt(2.0)


class ImageCritic(nn.Module):
    """D_r: residual downsampling trunk from the image to one logit."""

    def __init__(self, resolution: int, c_img: int, channels: Optional[List[int]] = None,
                 zero_last: bool = False):
        super().__init__()
        n_down = int(math.log2(resolution // 4))
        if channels is None:
            channels = [min(128, 2048 // (resolution >> i)) for i in range(n_down + 1)]
        if len(channels) != n_down + 1:
            raise InvalidArgument(f"D_r needs {n_down + 1} channel entries")
        self.resolution = resolution
        self.c_img = c_img
        self.from_img = EqualizedConv2d(c_img, channels[0], 1)
        self.blocks = nn.ModuleList(ResBlockDown(channels[i], channels[i + 1]) for i in range(n_down))
        self.conv = EqualizedConv2d(channels[-1], channels[-1], 3, padding=1)
        self.fc = EqualizedLinear(channels[-1] * 16, channels[-1])
        self.out = EqualizedLinear(channels[-1], 1)
        if zero_last:
            with torch.no_grad():
                self.out.weight.zero_()

    def forward(self, x):
        if x.shape[-3:] != (self.c_img, self.resolution, self.resolution):
            raise InvalidArgument(f"D_r expects [*, {self.c_img}, {self.resolution}, {self.resolution}], "
                                  f"got {tuple(x.shape)}")
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        h = lrelu(self.from_img(x))
        for block in self.blocks:
            h = block(h)
        h = lrelu(self.conv(h))
        h = lrelu(self.fc(h.flatten(1)))
        out = self.out(h).squeeze(1)
        return out[0] if single else out


class PatchCritic(nn.Module):
    def __init__(self, in_ch: int, width: int, n_down: int):
        super().__init__()
        chans = [in_ch] + [min(width * 2 ** i, width * 4) for i in range(n_down)]
        self.convs = nn.ModuleList(EqualizedConv2d(chans[i], chans[i + 1], 4, stride=2, padding=1)
                                   for i in range(n_down))
        self.out = EqualizedConv2d(chans[-1], 1, 3, padding=1)

    def forward(self, x):
        for conv in self.convs:
            x = lrelu(conv(x))
        return self.out(x)


class PairCritic(nn.Module):
    """D_m: one patch critic per scale; scale s sees the pair downsampled by 2**s."""

    def __init__(self, resolution: int, c_img: int, c_cls: int, scales: int = 2, n_layers: int = 4,
                 width: int = 64):
        super().__init__()
        self.resolution = resolution
        self.c_img = c_img
        self.c_cls = c_cls
        nets = []
        for s in range(scales):
            size = resolution >> s
            # keep every logit map at least 2x2
            n_down = max(1, min(n_layers, int(math.log2(size)) - 1))
            nets.append(PatchCritic(c_img + c_cls, width, n_down))
        self.scales = nn.ModuleList(nets)

    def forward(self, image, mask_probs) -> List[torch.Tensor]:
        if image.shape[-2:] != (self.resolution, self.resolution) or image.shape[-3] != self.c_img:
            raise InvalidArgument(f"D_m image must be [*, {self.c_img}, {self.resolution}, {self.resolution}]")
        if mask_probs.shape[-3:] != (self.c_cls, self.resolution, self.resolution):
            raise InvalidArgument(f"D_m mask must be [*, {self.c_cls}, {self.resolution}, {self.resolution}]")
        single = image.dim() == 3
        x = torch.cat([image, mask_probs], dim=-3)
        if single:
            x = x.unsqueeze(0)
        maps = []
        for s, net in enumerate(self.scales):
            xs = F.avg_pool2d(x, 2 ** s) if s else x
            m = net(xs)
            maps.append(m[0] if single else m)
        return maps


def encode_pair(image: torch.Tensor, mask: torch.Tensor, c_cls: int, smooth: float = 0.0):
    """Turn an (image, mask) pair into D_m input.

    Integer label maps become one-hot (optionally smoothed by ``smooth``);
    floating-point masks are treated as logits and softmaxed over the class
    axis. Returns ``(image, probs)``.
    """
    if mask.dtype in (torch.int64, torch.int32, torch.uint8, torch.int16):
        if mask.numel() and (int(mask.max()) >= c_cls or int(mask.min()) < 0):
            raise InvalidArgument(f"class index out of range [0, {c_cls})")
        probs = F.one_hot(mask.long(), c_cls).movedim(-1, -3).to(image.dtype)
        if smooth:
            probs = probs * (1.0 - smooth) + smooth / c_cls
    else:
        if mask.shape[-3] != c_cls:
            raise InvalidArgument(f"logits must have {c_cls} channels")
        probs = torch.softmax(mask, dim=-3)
    return image, probs


def score_image(critic: ImageCritic, x):
    return critic(x)


def score_pair(critic: PairCritic, pair) -> List[torch.Tensor]:
    image, probs = pair
    return critic(image, probs)


def build_critics(resolution: int, c_img: int, c_cls: int, disc_cfg, seed: int = 0):
    with seeded_init(seed):
        d_r = ImageCritic(resolution, c_img, disc_cfg.channels)
        d_m = PairCritic(resolution, c_img, c_cls, disc_cfg.dm_scales, disc_cfg.dm_layers, disc_cfg.dm_channels)
    return d_r, d_m
