"""Overlap metrics, the supervised U-Net baseline, and the ablation/distillation protocols."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import RunConfig
from .core import SeededRng, seeded_init
from .data import DatasetManifest, split as make_split
from .errors import InvalidArgument
from .generator import JointGenerator, sample_pairs
from .inversion import InversionConfig, encode_only_segment, invert
from .objectives import PerceptualNet, cross_entropy_mask, dice_loss

log = logging.getLogger(__name__)

Segmenter = Callable[[torch.Tensor], torch.Tensor]


# -- metrics -------------------------------------------------------------------

def _as_array(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


@dataclass
class ConfusionCounts:
    """Per-class TP/FP/FN/TN over one mask pair or accumulated over a set."""
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def zeros(cls, c_cls: int) -> "ConfusionCounts":
        z = lambda: np.zeros(c_cls, dtype=np.int64)
        return cls(z(), z(), z(), z())

    @classmethod
    def from_pair(cls, pred, gt, c_cls: int) -> "ConfusionCounts":
        p, g = _as_array(pred), _as_array(gt)
        if p.shape != g.shape:
            raise InvalidArgument(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
        p, g = p.reshape(-1).astype(np.int64), g.reshape(-1).astype(np.int64)
        for a in (p, g):
            if a.size and (a.min() < 0 or a.max() >= c_cls):
                raise InvalidArgument(f"label outside class range [0, {c_cls})")
        conf = np.bincount(g * c_cls + p, minlength=c_cls * c_cls).reshape(c_cls, c_cls)
        tp = np.diag(conf).copy()
        fp = conf.sum(0) - tp
        fn = conf.sum(1) - tp
        tn = p.size - tp - fp - fn
        return cls(tp, fp, fn, tn)

    @property
    def c_cls(self) -> int:
        return len(self.tp)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def iou(self, cls: int) -> float:
        den = self.tp[cls] + self.fp[cls] + self.fn[cls]
        return 1.0 if den == 0 else float(self.tp[cls] / den)

    def dice(self, cls: int) -> float:
        den = 2 * self.tp[cls] + self.fp[cls] + self.fn[cls]
        return 1.0 if den == 0 else float(2 * self.tp[cls] / den)


def _pair_counts(pred, gt, cls: int) -> ConfusionCounts:
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise InvalidArgument(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if cls < 0:
        raise InvalidArgument(f"class index must be >= 0, got {cls}")
    c_cls = int(max(p.max(initial=0), g.max(initial=0), cls)) + 1
    return ConfusionCounts.from_pair(p, g, c_cls)


def dice_score(pred, gt, cls: int = 1) -> float:
    """2 TP / (2 TP + FP + FN) for ``cls``; 1.0 when the class is absent from both."""
    return _pair_counts(pred, gt, cls).dice(cls)


def jc_index(pred, gt, cls: int = 1) -> float:
    """TP / (TP + FP + FN) for ``cls``; 1.0 when the class is absent from both."""
    return _pair_counts(pred, gt, cls).iou(cls)


def miou(pred_or_counts, gt=None, c_cls: Optional[int] = None) -> float:
    """Mean IoU over classes >= 1 from (dataset-accumulated) counts."""
    if isinstance(pred_or_counts, ConfusionCounts):
        counts = pred_or_counts
    else:
        if gt is None:
            raise InvalidArgument("miou needs gt when given a prediction")
        if c_cls is None:
            c_cls = int(max(_as_array(pred_or_counts).max(initial=0), _as_array(gt).max(initial=0))) + 1
            c_cls = max(c_cls, 2)
        counts = ConfusionCounts.from_pair(pred_or_counts, gt, c_cls)
    if counts.c_cls < 2:
        raise InvalidArgument("miou needs at least two classes")
    return float(np.mean([counts.iou(c) for c in range(1, counts.c_cls)]))


def foreground_mean(counts: ConfusionCounts, which: str) -> float:
    """Per-image dice or jc averaged over foreground classes (just class 1 for binary tasks)."""
    fn = counts.dice if which == "dice" else counts.iou
    return float(np.mean([fn(c) for c in range(1, counts.c_cls)]))


# -- reports ---------------------------------------------------------------------

METRICS = ("dice", "jc", "miou")


@dataclass
class EvalReport:
    split: str
    metric: str
    n_items: int
    mean: Dict[str, float]
    median: Dict[str, float]
    per_item: Dict[str, List[float]]
    item_ids: List[int]
    extra: Dict[str, object] = field(default_factory=dict)

    @property
    def value(self) -> float:
        """Headline number for the report's metric."""
        return self.mean[self.metric]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "report.json"
        path.write_text(self.to_json())
        with open(out_dir / "per_item.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["item_id", "dice", "jc"])
            for i, item in enumerate(self.item_ids):
                w.writerow([item, repr(self.per_item["dice"][i]), repr(self.per_item["jc"][i])])
        return path


def resolve_metric(metric: str, c_cls: int) -> str:
    if metric == "auto":
        return "dice" if c_cls == 2 else "miou"
    if metric not in METRICS:
        raise InvalidArgument(f"unknown metric {metric!r}; expected one of {METRICS} or 'auto'")
    if metric == "miou" and c_cls < 2:
        raise InvalidArgument("miou needs at least two classes")
    return metric


def evaluate_model(segmenter_fn: Segmenter, manifest: DatasetManifest, split: str = "test", metric: str = "auto",
                   batch: int = 50, limit: Optional[int] = None) -> EvalReport:
    """Run ``segmenter_fn`` over a split in manifest order and score every item.

    DICE and JC are per-image (foreground-class mean) then averaged; mIoU is
    computed once from counts accumulated over the whole split.
    """
    metric = resolve_metric(metric, manifest.c_cls)
    ids = list(manifest.splits.get(split, []))[:limit]
    if not ids:
        raise InvalidArgument(f"split {split!r} is empty")
    imgs, labels = manifest.split_arrays(split, limit)
    total = ConfusionCounts.zeros(manifest.c_cls)
    per = {"dice": [], "jc": []}
    for start in range(0, len(ids), batch):
        pred = segmenter_fn(imgs[start:start + batch])
        gt = labels[start:start + batch]
        if tuple(pred.shape) != tuple(gt.shape):
            raise InvalidArgument(f"segmenter returned {tuple(pred.shape)}, expected {tuple(gt.shape)}")
        for p, g in zip(pred, gt):
            c = ConfusionCounts.from_pair(p, g, manifest.c_cls)
            total = total + c
            per["dice"].append(foreground_mean(c, "dice"))
            per["jc"].append(foreground_mean(c, "jc"))
    m = miou(total)
    mean = {k: float(np.mean(v)) for k, v in per.items()}
    median = {k: float(statistics.median(v)) for k, v in per.items()}
    mean["miou"] = median["miou"] = m
    return EvalReport(split, metric, len(ids), mean, median, per, ids)


def inversion_segmenter(G: JointGenerator, E, cfg: Optional[InversionConfig] = None,
                        net: Optional[PerceptualNet] = None) -> Segmenter:
    """Ours: encoder init followed by test-time optimization."""
    net = net if net is not None else PerceptualNet(G.cfg.c_img)

    def fn(x):
        return torch.stack([r.labels for r in invert(x, G, E, cfg, net)])
    return fn


def encoder_segmenter(G: JointGenerator, E) -> Segmenter:
    """Ours-NO: labels straight from the encoder's code."""
    return lambda x: encode_only_segment(x, G, E)


# -- baseline segmenter ------------------------------------------------------------

class _DoubleConv(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1), nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True),
        )


class BaselineSegmenter(nn.Module):
    """Small U-Net: four pooling stages down, four transposed-conv stages up, skip concatenation."""

    def __init__(self, c_img: int, c_cls: int, channels: Sequence[int] = (16, 32, 64, 128)):
        super().__init__()
        if len(channels) != 4:
            raise InvalidArgument("baseline segmenter expects four channel widths")
        ch = list(channels)
        self.c_img, self.c_cls, self.channels = c_img, c_cls, ch
        self.inc = _DoubleConv(c_img, ch[0])
        downs, ins = [], ch[0]
        for c in ch[1:] + [ch[-1] * 2]:
            downs.append(_DoubleConv(ins, c))
            ins = c
        self.downs = nn.ModuleList(downs)
        ups, convs = [], []
        for c in reversed(ch):
            ups.append(nn.ConvTranspose2d(ins, c, 2, stride=2))
            convs.append(_DoubleConv(2 * c, c))
            ins = c
        self.ups, self.up_convs = nn.ModuleList(ups), nn.ModuleList(convs)
        self.out = nn.Conv2d(ch[0], c_cls, 1)

    def forward(self, x):
        if x.shape[-1] % 16 or x.shape[-2] % 16:
            raise InvalidArgument(f"spatial size must be divisible by 16, got {tuple(x.shape[-2:])}")
        skips = [self.inc(x)]
        h = skips[0]
        for down in self.downs:
            h = down(F.max_pool2d(h, 2))
            skips.append(h)
        skips.pop()
        for up, conv in zip(self.ups, self.up_convs):
            h = conv(torch.cat([skips.pop(), up(h)], dim=1))
        return self.out(h)

    @torch.no_grad()
    def predict(self, x) -> torch.Tensor:
        was = self.training
        self.eval()
        out = self(x).argmax(dim=1)
        self.train(was)
        return out


def train_segmenter(images: torch.Tensor, labels: torch.Tensor, c_cls: int, epochs: int, batch: int = 8,
                    lr: float = 1e-3, seed: int = 0, channels: Sequence[int] = (16, 32, 64, 128),
                    dice_eps: float = 1.0):
    """Fit a :class:`BaselineSegmenter` with CE + soft dice. Returns (model, per-epoch mean losses)."""
    if images.shape[0] == 0:
        raise InvalidArgument("no training pairs")
    with seeded_init(seed):
        model = BaselineSegmenter(images.shape[1], c_cls, channels)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = SeededRng(seed, "segmenter")
    n = images.shape[0]
    history = []
    model.train()
    for _ in range(epochs):
        order = torch.randperm(n, generator=rng.generator)
        losses = []
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            if idx.numel() < 2:
                if n >= 2:
                    continue  # batch norm needs two samples
                idx = idx.repeat(2)
            logits = model(images[idx])
            loss = cross_entropy_mask(labels[idx], logits, "mean") + dice_loss(labels[idx], logits, dice_eps)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history.append(float(np.mean(losses)) if losses else math.nan)
    model.eval()
    return model, history


def train_baseline(manifest: DatasetManifest, k: Optional[int] = None, epochs: int = 200, batch: int = 8,
                   lr: float = 1e-3, seed: int = 0, channels: Sequence[int] = (16, 32, 64, 128)):
    """Supervised-only baseline on the first ``k`` labeled items. Returns (model, history)."""
    lab = manifest.splits["labeled"]
    k = len(lab) if k is None else k
    if k < 1:
        raise InvalidArgument("baseline needs k >= 1 labeled examples")
    if k > len(lab):
        raise InvalidArgument(f"k={k} exceeds the labeled split ({len(lab)} items)")
    x, y = manifest.split_arrays("labeled", k)
    return train_segmenter(x, y, manifest.c_cls, epochs, batch, lr, seed, channels)


# -- protocols ---------------------------------------------------------------------

def _write_rows(path: Path, header: List[str], rows: List[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow({h: r.get(h, "") for h in header})


def run_label_ablation(cfg: RunConfig, manifest: DatasetManifest, shifted: Optional[DatasetManifest], out_dir,
                       ks: Optional[Sequence[int]] = None, ns: Optional[Sequence[int]] = None,
                       inv_cfg: Optional[InversionConfig] = None) -> List[dict]:
    """Train the full pipeline per (k, n) cell at a reduced budget and score it.

    Cells share the test items (test is drawn first from the same permutation);
    only the ``eval.ablation_test`` scored items are reserved for test.
    Infeasible cells are recorded as skipped. Writes ``ablation.csv``.
    """
    from .training import load_encoder, load_generator, train_encoder, train_gan

    out_dir = Path(out_dir)
    ks = list(ks if ks is not None else cfg.eval.ablation_k)
    ns = list(ns if ns is not None else cfg.eval.ablation_n)
    d = cfg.data
    n_test = cfg.eval.ablation_test
    cell_cfg = copy.deepcopy(cfg)
    cell_cfg.train.gan_steps = cfg.eval.ablation_gan_steps
    cell_cfg.train.enc_steps = cfg.eval.ablation_enc_steps
    inv_cfg = inv_cfg or InversionConfig.from_run(cfg)
    net = PerceptualNet(manifest.c_img, cfg.loss.perceptual_seed, cfg.loss.perceptual_channels)
    rows = []
    for k in ks:
        for n in ns:
            row = {"k": k, "n": n}
            try:
                m = make_split(manifest, k, n, d.val, n_test, d.split_seed, enforce_scarcity=False, write=False)
            except InvalidArgument as exc:
                log.warning("ablation cell k=%d n=%d skipped: %s", k, n, exc)
                rows.append({**row, "status": f"skipped: {exc}"})
                continue
            cell_dir = out_dir / f"k{k}_n{n}"
            gan_ck = cell_dir / "gan" / "gan.ckpt"
            if not gan_ck.exists():
                train_gan(cell_cfg, m, cell_dir / "gan")
            enc_ck = cell_dir / "encoder" / "encoder.ckpt"
            if not enc_ck.exists():
                train_encoder(cell_cfg, gan_ck, m, cell_dir / "encoder")
            G, E = load_generator(gan_ck), load_encoder(enc_ck)
            seg = inversion_segmenter(G, E, inv_cfg, net)
            rep_in = evaluate_model(seg, m, "test", limit=n_test)
            rep_in.extra.update(method=f"ours-k{k}-n{n}", domain="in")
            rep_in.write(cell_dir / "eval_in")
            row.update(status="ok", metric=rep_in.metric, value_in=rep_in.value)
            if shifted is not None:
                ms = DatasetManifest(shifted.root, shifted.recipe, shifted.items, m.splits)
                rep_out = evaluate_model(seg, ms, "test", limit=n_test)
                rep_out.extra.update(method=f"ours-k{k}-n{n}", domain="out")
                rep_out.write(cell_dir / "eval_out")
                row["value_out"] = rep_out.value
            rows.append(row)
    _write_rows(out_dir / "ablation.csv", ["k", "n", "status", "metric", "value_in", "value_out"], rows)
    return rows


def run_lambda2_sweep(cfg: RunConfig, G: JointGenerator, E, manifest: DatasetManifest, out_dir,
                      lambdas: Optional[Sequence[float]] = None, limit: Optional[int] = None,
                      domain: str = "in") -> List[dict]:
    """Score inversion at each consistency weight; writes ``lambda2_sweep.csv`` and one report per value."""
    lambdas = list(cfg.eval.lambda2_sweep if lambdas is None else lambdas)
    if not lambdas:
        raise InvalidArgument("empty lambda2 sweep")
    net = PerceptualNet(G.cfg.c_img, cfg.loss.perceptual_seed, cfg.loss.perceptual_channels)
    out_dir = Path(out_dir)
    rows = []
    for lam in lambdas:
        seg = inversion_segmenter(G, E, InversionConfig.from_run(cfg, lambda2=float(lam)), net)
        rep = evaluate_model(seg, manifest, cfg.eval.split, cfg.eval.metric, limit=limit)
        rep.extra.update(method=f"ours-lambda2={lam:g}", domain=domain, lambda2=float(lam))
        rep.write(out_dir / f"lambda2_{lam:g}")
        rows.append({"lambda2": float(lam), "domain": domain, "metric": rep.metric, "value": rep.value,
                     "median": rep.median[rep.metric], "n": rep.n_items})
    _write_rows(out_dir / "lambda2_sweep.csv", ["lambda2", "domain", "metric", "value", "median", "n"], rows)
    return rows


STRATEGIES = ("sim-div", "sim-tru", "mix-div", "mix-tru")


def run_distillation(cfg: RunConfig, G: JointGenerator, manifest: DatasetManifest,
                     shifted: Optional[DatasetManifest], out_dir, synth_count: Optional[int] = None,
                     real_k: Optional[int] = None, strategies: Sequence[str] = STRATEGIES,
                     epochs: Optional[int] = None, trained: bool = True) -> List[dict]:
    """Train baseline segmenters on generator samples (sim) or samples plus D_l (mix).

    ``div`` samples with psi = 1, ``tru`` with ``eval.distill_psi``. Writes
    ``distillation.csv`` with in- and out-of-domain scores per strategy.
    """
    e = cfg.eval
    synth_count = e.distill_synth if synth_count is None else synth_count
    epochs = e.distill_epochs if epochs is None else epochs
    if not trained:
        log.warning("distilling from an untrained generator; results are not meaningful")
    for s in strategies:
        if s not in STRATEGIES:
            raise InvalidArgument(f"unknown strategy {s!r}; expected one of {STRATEGIES}")
        if s.startswith("sim") and synth_count <= 0:
            raise InvalidArgument("sim strategies need synth_count > 0")
    if synth_count < 0:
        raise InvalidArgument("synth_count must be >= 0")
    lab = manifest.splits["labeled"]
    real_k = len(lab) if real_k is None else real_k
    x_real, y_real = manifest.split_arrays("labeled", real_k)
    pools = {}
    for kind, psi in (("div", 1.0), ("tru", e.distill_psi)):
        if any(s.endswith(kind) for s in strategies) and synth_count > 0:
            pairs = sample_pairs(G, synth_count, psi, SeededRng(cfg.seed, f"distill-{kind}"))
            pools[kind] = (torch.from_numpy(np.stack([p[0] for p in pairs])),
                           torch.from_numpy(np.stack([p[1] for p in pairs]).astype(np.int64)))
    out_dir = Path(out_dir)
    rows = []
    for s in strategies:
        source, kind = s.split("-")
        parts_x, parts_y = [], []
        if kind in pools:
            parts_x.append(pools[kind][0])
            parts_y.append(pools[kind][1])
        if source == "mix":
            parts_x.append(x_real)
            parts_y.append(y_real)
        x, y = torch.cat(parts_x), torch.cat(parts_y)
        model, hist = train_segmenter(x, y, manifest.c_cls, epochs, e.baseline_batch, e.baseline_lr,
                                      seed=cfg.seed, channels=e.baseline_channels)
        rep = evaluate_model(model.predict, manifest, e.split)
        rep.extra.update(method=s, domain="in")
        rep.write(out_dir / s / "eval_in")
        row = {"strategy": s, "synth_count": synth_count, "real_k": real_k if source == "mix" else 0,
               "metric": rep.metric, "value_in": rep.value, "final_loss": hist[-1] if hist else math.nan}
        if shifted is not None:
            rep_out = evaluate_model(model.predict, shifted, e.split)
            rep_out.extra.update(method=s, domain="out")
            rep_out.write(out_dir / s / "eval_out")
            row["value_out"] = rep_out.value
        rows.append(row)
    _write_rows(out_dir / "distillation.csv",
                ["strategy", "synth_count", "real_k", "metric", "value_in", "value_out", "final_loss"], rows)
    return rows
