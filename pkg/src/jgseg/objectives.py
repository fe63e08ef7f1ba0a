"""Loss functions for the adversarial stage, the encoder stage and inversion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .core import seeded_init
from .errors import ContractViolation, InvalidArgument


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.1
    gamma_r1: float = 10.0
    dice_eps: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "gamma_r1", "dice_eps"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be >= 0")

    @classmethod
    def from_run(cls, cfg) -> "LossWeights":
        l = cfg.loss
        return cls(l.lambda1, l.lambda2, l.lambda3, l.gamma_r1, l.dice_eps)


# -- adversarial ---------------------------------------------------------------

def _flat(logits) -> torch.Tensor:
    if isinstance(logits, (list, tuple)):
        if not logits:
            raise InvalidArgument("empty logit collection")
        return torch.cat([l.reshape(-1) for l in logits])
    return logits.reshape(-1)


def d_logistic_loss(real_logits, fake_logits) -> torch.Tensor:
    """mean softplus(-real) + mean softplus(fake)."""
    real, fake = _flat(real_logits), _flat(fake_logits)
    if real.numel() == 0 or fake.numel() == 0:
        raise InvalidArgument("logistic loss needs non-empty logit collections")
    return F.softplus(-real).mean() + F.softplus(fake).mean()


def _maps_mean(maps: Sequence[torch.Tensor], fn) -> torch.Tensor:
    # uniform over scales, uniform over patches within a scale
    if len(maps) == 0:
        raise InvalidArgument("no patch maps")
    terms = []
    for m in maps:
        if m.numel() == 0:
            raise InvalidArgument("zero-size patch map")
        terms.append(fn(m).mean())
    return torch.stack(terms).mean()


def d_pair_loss(real_maps: Sequence[torch.Tensor], fake_maps: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(real_maps) != len(fake_maps):
        raise InvalidArgument(f"scale count mismatch: {len(real_maps)} real vs {len(fake_maps)} fake")
    return _maps_mean(real_maps, lambda m: F.softplus(-m)) + _maps_mean(fake_maps, lambda m: F.softplus(m))


def g_adv_term(fake_logits, kind: str = "nonsaturating") -> torch.Tensor:
    """Generator-side term for one critic; logits may be a tensor or a list of patch maps."""
    if kind == "nonsaturating":
        fn = lambda m: F.softplus(-m)
    elif kind == "minimax":
        # log(1 - sigmoid(l)) = -softplus(l)
        fn = lambda m: -F.softplus(m)
    else:
        raise InvalidArgument(f"unknown gan loss {kind!r}")
    if isinstance(fake_logits, (list, tuple)):
        return _maps_mean(fake_logits, fn)
    if fake_logits.numel() == 0:
        raise InvalidArgument("empty logit collection")
    return fn(fake_logits).mean()


def g_loss(fake_image_logits, fake_pair_maps_with_stopped_image=None, kind: str = "nonsaturating",
           image_weight: float = 1.0) -> torch.Tensor:
    """Image-critic term plus pair-critic term.

    The pair maps must come from ``D_m(stop_gradient(x_f), softmax(y_f))``: the
    image synthesis branch learns only from D_r. Pass ``None`` for the pair
    maps when no labeled data is available.
    """
    loss = image_weight * g_adv_term(fake_image_logits, kind)
    if fake_pair_maps_with_stopped_image is not None:
        loss = loss + g_adv_term(fake_pair_maps_with_stopped_image, kind)
    return loss


def assert_stopped(pair_term: torch.Tensor, timage_params: Sequence[torch.Tensor]) -> None:
    """Gradient probe: the pair term must not reach any tImage parameter."""
    grads = torch.autograd.grad(pair_term, list(timage_params), retain_graph=True, allow_unused=True)
    for g in grads:
        if g is not None and bool(torch.any(g != 0)):
            raise ContractViolation("pair term of the generator loss reaches tImage parameters; "
                                    "the image must enter D_m through stop_gradient")


def r1_penalty(critic, real_input, gamma: float = 10.0) -> torch.Tensor:
    """(gamma / 2) * mean over the batch of ||d critic / d input||^2.

    ``real_input`` is a tensor or a tuple of tensors (image, mask probs); for
    tuples the squared norm sums over all of them. List-valued critic outputs
    (patch maps) are summed before differentiation.
    """
    inputs = real_input if isinstance(real_input, (tuple, list)) else (real_input,)
    for t in inputs:
        if not t.requires_grad:
            raise InvalidArgument("r1_penalty needs inputs with requires_grad=True")
    out = critic(*inputs)
    total = sum(o.sum() for o in out) if isinstance(out, (list, tuple)) else out.sum()
    grads = torch.autograd.grad(total, inputs, create_graph=True, allow_unused=True)
    batch = inputs[0].shape[0] if inputs[0].dim() > 1 else 1
    sq = sum(g.pow(2).sum() for g in grads if g is not None)
    if not torch.is_tensor(sq):
        return torch.zeros((), dtype=inputs[0].dtype)
    return 0.5 * gamma * sq / batch


# -- segmentation --------------------------------------------------------------

def _check_labels(labels: torch.Tensor, logits: torch.Tensor) -> None:
    if labels.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise InvalidArgument(f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    c = logits.shape[-3]
    if labels.numel() and (int(labels.max()) >= c or int(labels.min()) < 0):
        raise InvalidArgument(f"label outside class range [0, {c})")


def cross_entropy_mask(labels: torch.Tensor, logits: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Pixel-wise cross-entropy.

    ``reduction="sum"`` sums over the pixels of each image, ``"mean"``
    averages; batched inputs are then averaged over the batch.
    """
    _check_labels(labels, logits)
    single = logits.dim() == 3
    if single:
        logits, labels = logits.unsqueeze(0), labels.unsqueeze(0)
    nll = F.cross_entropy(logits, labels.long(), reduction="none").flatten(1)
    per_image = nll.sum(1) if reduction == "sum" else nll.mean(1)
    return per_image.mean()


def dice_loss(labels: torch.Tensor, logits: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft dice over foreground classes, averaged over classes then batch."""
    _check_labels(labels, logits)
    c = logits.shape[-3]
    if c < 2:
        raise InvalidArgument("dice loss needs at least two classes")
    single = logits.dim() == 3
    if single:
        logits, labels = logits.unsqueeze(0), labels.unsqueeze(0)
    p = torch.softmax(logits, dim=1)[:, 1:].flatten(2)
    y = F.one_hot(labels.long(), c).movedim(-1, 1)[:, 1:].flatten(2).to(p.dtype)
    score = (2 * (p * y).sum(-1) + eps) / (p.sum(-1) + y.sum(-1) + eps)
    return 1.0 - score.mean()


# -- perceptual ----------------------------------------------------------------

class PerceptualNet(nn.Module):
    """Fixed random conv features, three stages, channel-normalized.

    A stand-in for a pretrained LPIPS backbone: weights come from ``seed``
    and never receive gradients.
    """

    def __init__(self, c_img: int, seed: int = 1234, channels: Sequence[int] = (16, 32, 64)):
        super().__init__()
        self.seed = seed
        with seeded_init(seed):
            chans = [c_img] + list(channels)
            self.convs = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 3, padding=1)
                                       for i in range(len(channels)))
            for conv in self.convs:
                nn.init.kaiming_normal_(conv.weight, a=0.2)
                nn.init.zeros_(conv.bias)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x) -> List[torch.Tensor]:
        feats = []
        h = x
        for i, conv in enumerate(self.convs):
            if i:
                h = F.avg_pool2d(h, 2)
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h * torch.rsqrt(h.pow(2).sum(dim=1, keepdim=True) + 1e-10))
        return feats

    def distance(self, x1, x2) -> torch.Tensor:
        """Per-sample distance for batched inputs, scalar for single images."""
        if x1.shape != x2.shape:
            raise InvalidArgument(f"shape mismatch {tuple(x1.shape)} vs {tuple(x2.shape)}")
        single = x1.dim() == 3
        if single:
            x1, x2 = x1.unsqueeze(0), x2.unsqueeze(0)
        conv_dtype = self.convs[0].weight.dtype
        if x1.dtype != conv_dtype:
            self.to(x1.dtype)
        f1, f2 = self.features(x1), self.features(x2)
        d = sum((a - b).pow(2).flatten(1).mean(1) for a, b in zip(f1, f2))
        return d[0] if single else d


def perceptual_distance(x1, x2, net: PerceptualNet) -> torch.Tensor:
    d = net.distance(x1, x2)
    return d if d.dim() == 0 else d.mean()


def reconstruction_loss(x, x_star, net: Optional[PerceptualNet], lambda3: float, reduce: bool = True):
    """Perceptual distance plus ``lambda3`` times the mean squared pixel error."""
    if x.shape != x_star.shape:
        raise InvalidArgument(f"shape mismatch {tuple(x.shape)} vs {tuple(x_star.shape)}")
    single = x.dim() == 3
    xb, sb = (x.unsqueeze(0), x_star.unsqueeze(0)) if single else (x, x_star)
    mse = (xb - sb).pow(2).flatten(1).mean(1)
    perc = net.distance(xb, sb) if net is not None else torch.zeros_like(mse)
    per = perc + lambda3 * mse
    if single:
        return per[0]
    return per.mean() if reduce else per


def encoder_loss(batch_l: Optional[Tuple[torch.Tensor, torch.Tensor]], batch_u: Optional[torch.Tensor], G, E,
                 weights: LossWeights, net: PerceptualNet, ce_reduction: str = "mean") -> Tuple[torch.Tensor, Dict]:
    """Supervised segmentation loss on labeled pairs plus reconstruction loss on all images.

    The generator must be frozen; any G parameter with ``requires_grad`` set
    raises :class:`ContractViolation`.
    """
    for name, p in G.named_parameters():
        if p.requires_grad:
            raise ContractViolation(f"generator parameter {name} is not frozen during encoder training")
    parts = {}
    images = []
    if batch_l is not None and batch_l[0].shape[0] > 0:
        x_l, y_l = batch_l
        _, logits = G.synthesize(E(x_l))
        ce = cross_entropy_mask(y_l, logits, reduction=ce_reduction)
        dc = dice_loss(y_l, logits, eps=weights.dice_eps)
        parts["ce"], parts["dice"] = ce, dc
        l_s = ce + dc
        images.append(x_l)
    else:
        l_s = torch.zeros(())
    if batch_u is not None and batch_u.shape[0] > 0:
        images.insert(0, batch_u)
    x = torch.cat(images)
    x_rec, _ = G.synthesize(E(x))
    perc = perceptual_distance(x_rec, x, net)
    mse = (x_rec - x).pow(2).mean()
    l_u = perc + weights.lambda1 * mse
    parts.update(perceptual=perc, mse=mse, L_s=l_s, L_u=l_u)
    total = l_s + l_u
    return total, {k: float(v.detach()) for k, v in parts.items()}
