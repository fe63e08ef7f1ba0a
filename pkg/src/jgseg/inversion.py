"""Test-time segmentation by encoder-initialized optimization in W+."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import torch

from .encoder import Encoder
from .errors import DivergedInversion, InvalidArgument
from .generator import JointGenerator
from .objectives import PerceptualNet, reconstruction_loss


@dataclass
class InversionConfig:
    steps: int = 300
    lr: float = 0.05
    lr_final: float = 0.005
    lambda2: float = 0.1
    lambda3: float = 0.1
    consistency_every: int = 1
    clip: float = 10.0
    batch: int = 50
    noise_mode: str = "zero"

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidArgument("steps must be >= 0")
        if self.lambda2 < 0 or self.lambda3 < 0:
            raise InvalidArgument("lambda2 and lambda3 must be >= 0")
        if self.noise_mode != "zero":
            raise InvalidArgument("inversion runs with zero noise only")

    @classmethod
    def from_run(cls, cfg, **overrides) -> "InversionConfig":
        i = cfg.invert
        kw = dict(steps=i.steps, lr=i.lr, lr_final=i.lr_final, lambda2=cfg.loss.lambda2, lambda3=cfg.loss.lambda3,
                  consistency_every=i.consistency_every, clip=i.clip, batch=i.batch, noise_mode=i.noise_mode)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class InversionResult:
    w_plus: torch.Tensor
    image: torch.Tensor
    logits: torch.Tensor
    trace: List[float] = field(default_factory=list)
    final_error: float = 0.0

    @property
    def labels(self) -> torch.Tensor:
        return self.logits.argmax(dim=0)


def cosine_lr(step: int, total: int, lr: float, lr_final: float) -> float:
    if total <= 0:
        return lr
    return lr_final + 0.5 * (lr - lr_final) * (1.0 + math.cos(math.pi * step / total))


def _objective(w, x_star, G, E, net, cfg: InversionConfig, with_consistency: bool):
    x, _ = G.synthesize(w)
    per = reconstruction_loss(x, x_star, net, cfg.lambda3, reduce=False)
    if with_consistency and cfg.lambda2 > 0:
        per = per + cfg.lambda2 * (w - E(x)).pow(2).flatten(1).mean(1)
    return per


def _invert_chunk(x_star, G, E, net, cfg: InversionConfig) -> List[InversionResult]:
    with torch.no_grad():
        w0 = E(x_star)
    w = w0.clone().requires_grad_(True)
    opt = torch.optim.Adam([w], lr=cfg.lr)
    traces = [[] for _ in range(x_star.shape[0])]

    def record(per):
        vals = per.detach()
        for i, v in enumerate(vals.tolist()):
            traces[i].append(v)
        if not torch.isfinite(vals).all():
            bad = int((~torch.isfinite(vals)).nonzero()[0])
            raise DivergedInversion(f"non-finite inversion loss at step {len(traces[bad]) - 1}", traces[bad])

    every = max(1, cfg.consistency_every)
    for t in range(cfg.steps):
        for group in opt.param_groups:
            group["lr"] = cosine_lr(t, cfg.steps, cfg.lr, cfg.lr_final)
        per = _objective(w, x_star, G, E, net, cfg, t % every == 0)
        record(per)
        (grad,) = torch.autograd.grad(per.sum(), [w])
        # per-sample clip keeps batched inversion identical to one-at-a-time
        norms = grad.flatten(1).norm(dim=1).clamp_min(1e-12)
        grad = grad * (cfg.clip / norms).clamp(max=1.0)[:, None, None]
        w.grad = grad
        opt.step()
    w_final = w.detach() if cfg.steps else w0
    with torch.no_grad():
        per = _objective(w_final, x_star, G, E, net, cfg, True)
        record(per)
        img, logits = G.synthesize(w_final)
        err = (img - x_star).pow(2).flatten(1).mean(1)
    return [InversionResult(w_final[i].clone(), img[i], logits[i], traces[i], float(err[i]))
            for i in range(x_star.shape[0])]


def invert(x_star: torch.Tensor, G: JointGenerator, E: Encoder, cfg: Optional[InversionConfig] = None,
           net: Optional[PerceptualNet] = None):
    """Embed ``x_star`` (one image ``[C, H, W]`` or a batch) into W+.

    Only the code is optimized; gradients are taken with respect to it alone,
    so no network parameter accumulates gradient or changes.
    Returns one :class:`InversionResult` per image (a single result for a
    single image).
    """
    cfg = cfg or InversionConfig()
    net = net if net is not None else PerceptualNet(G.cfg.c_img)
    single = x_star.dim() == 3
    xs = x_star.unsqueeze(0) if single else x_star
    res = G.cfg.resolution
    if xs.shape[1:] != (G.cfg.c_img, res, res):
        raise InvalidArgument(f"target must be [{G.cfg.c_img}, {res}, {res}], got {tuple(x_star.shape[-3:])}")
    results: List[InversionResult] = []
    for start in range(0, xs.shape[0], max(1, cfg.batch)):
        results += _invert_chunk(xs[start:start + cfg.batch], G, E, net, cfg)
    return results[0] if single else results


def segment(x_star, G, E, cfg: Optional[InversionConfig] = None, net: Optional[PerceptualNet] = None):
    """Label map(s) from the optimized code."""
    out = invert(x_star, G, E, cfg, net)
    if isinstance(out, InversionResult):
        return out.labels
    return torch.stack([r.labels for r in out])


@torch.no_grad()
def encode_only_segment(x_star, G: JointGenerator, E: Encoder) -> torch.Tensor:
    """Label map(s) decoded straight from the encoder's code, no optimization."""
    _, logits = G.synthesize(E(x_star))
    return logits.argmax(dim=-3)
