"""Empirical checks on the cached acceptance run (trained 32x32 BLOBS-A models)."""
import csv
import json
import time

import numpy as np
import pytest
import torch

from jgseg.config import resolve_config
from jgseg.core import SeededRng, normal_sample, read_checkpoint
from jgseg.critics import encode_pair
from jgseg.data import DatasetManifest
from jgseg.generator import sample_pairs
from jgseg.inversion import InversionConfig, encode_only_segment, segment
from jgseg.objectives import LossWeights, PerceptualNet, encoder_loss, perceptual_distance
from jgseg.training import EncoderTrainer, GanTrainer, load_encoder, load_generator

import acceptance_runs

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def run():
    acceptance_runs.build()
    root = acceptance_runs.run_dir()
    cfg = resolve_config(str(acceptance_runs.CONFIG), [])
    m = DatasetManifest.load(root / "make-data" / "data")
    return root, cfg, m


@pytest.fixture(scope="module")
def models(run):
    root, _, _ = run
    return load_generator(root / "train-gan" / "gan.ckpt"), load_encoder(root / "train-encoder" / "encoder.ckpt")


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_every_class_appears_in_samples(models):
    G, _ = models
    labels = np.stack([p[1] for p in sample_pairs(G, 1000, 1.0, SeededRng(5, "hist"))])
    assert set(np.unique(labels)) == {0, 1}


def test_critic_responds_to_mismatched_mask(run):
    root, _, m = run
    tr = GanTrainer.from_checkpoint(root / "train-gan" / "gan.ckpt")
    x, y = m.split_arrays("labeled", 2)
    img, probs = encode_pair(x[:1], y[1:2], 2)
    probs = probs.clone().requires_grad_(True)
    maps = tr.D_m(img, probs)
    (g,) = torch.autograd.grad(sum(t.sum() for t in maps), [probs])
    assert torch.any(g != 0)


def test_dr_loss_stays_in_band(run):
    root, _, _ = run
    rows = [r for r in _csv(root / "train-gan" / "progress.csv") if int(r["step"]) > 19000]
    vals = [float(r["L_Dr"]) for r in rows]
    assert rows and all(0.1 < v < 3.0 for v in vals)


def test_samples_move_toward_data(run, models):
    root, cfg, m = run
    G, _ = models
    G0 = GanTrainer(cfg, 1, 2).G_ema
    net = PerceptualNet(1, cfg.loss.perceptual_seed, cfg.loss.perceptual_channels)
    val, _ = m.split_arrays("val")

    def nearest(gen):
        with torch.no_grad():
            z = normal_sample(SeededRng(0, "grid"), (16, gen.cfg.d_z))
            imgs, _ = gen(z)
            d = [[float(perceptual_distance(s, v, net)) for v in val] for s in imgs]
        return float(np.mean(np.min(d, axis=1)))
    assert nearest(G) < nearest(G0)


def test_encoder_validation_loss_decreased(run):
    root, _, _ = run
    meta = read_checkpoint(root / "train-encoder" / "encoder.ckpt").meta
    assert meta["val_L_u_end"] < meta["val_L_u_start"]


def test_trained_encoder_beats_untrained(run, models):
    _, cfg, m = run
    G, E = models
    net = PerceptualNet(1, cfg.loss.perceptual_seed, cfg.loss.perceptual_channels)
    x, _ = m.split_arrays("unlabeled", 64)
    fresh = EncoderTrainer(cfg, G).E
    with torch.no_grad():
        trained = perceptual_distance(G.synthesize(E(x))[0], x, net).mean()
        untrained = perceptual_distance(G.synthesize(fresh(x))[0], x, net).mean()
    assert float(trained) < float(untrained)


def test_one_encoder_epoch_lowers_validation_loss(run, models):
    _, cfg, m = run
    G, _ = models
    tr = EncoderTrainer(cfg, G)
    xv, yv = m.split_arrays("val")
    imgs, labels = m.arrays()

    def val_total():
        with torch.no_grad():
            total, _ = encoder_loss((xv, yv), xv, G, tr.E, LossWeights.from_run(cfg), tr.percept)
        return float(total)
    before = val_total()
    lab, pool = m.splits["labeled"], m.splits["unlabeled"]
    rng = SeededRng(0, "epoch")
    for _ in range(len(pool) // cfg.train.batch_u):
        li = torch.as_tensor(lab)[rng.randint(len(lab), cfg.train.batch_l)]
        ui = torch.as_tensor(pool)[rng.randint(len(pool), cfg.train.batch_u)]
        tr.enc_step((imgs[li], labels[li]), imgs[ui])
    assert val_total() < before


def test_encode_only_is_much_faster(run, models):
    _, cfg, m = run
    G, E = models
    x, _ = m.split_arrays("test", 8)
    t0 = time.perf_counter()
    encode_only_segment(x, G, E)
    fast = time.perf_counter() - t0
    t0 = time.perf_counter()
    segment(x, G, E, InversionConfig.from_run(cfg), PerceptualNet(1, cfg.loss.perceptual_seed,
                                                                   cfg.loss.perceptual_channels))
    assert time.perf_counter() - t0 >= 10 * fast


def test_baseline_in_domain(run):
    root, _, _ = run
    rep = json.loads((root / "baseline" / "in" / "report.json").read_text())
    assert rep["n_items"] == 200 and rep["mean"]["dice"] >= 0.8


def test_lambda2_sweep_recorded(run):
    root, cfg, _ = run
    rows = _csv(root / "evaluate" / "lambda2-sweep-out" / "lambda2_sweep.csv")
    assert [float(r["lambda2"]) for r in rows] == cfg.eval.lambda2_sweep
    per_item = [json.loads((root / "evaluate" / "lambda2-sweep-out" / f"lambda2_{lam:g}" / "report.json")
                           .read_text())["per_item"]["dice"] for lam in cfg.eval.lambda2_sweep]
    assert any(a != b for a, b in zip(per_item, per_item[1:]))


def test_pair_critic_prefers_true_masks(run):
    root, _, m = run
    tr = GanTrainer.from_checkpoint(root / "train-gan" / "gan.ckpt")
    x, y = m.split_arrays("test", 100)
    shuffled = torch.roll(y, 1, dims=0)

    def mean_logit(masks):
        with torch.no_grad():
            maps = tr.D_m(*encode_pair(x, masks, 2))
        return torch.stack([t.flatten(1).mean(1) for t in maps]).mean(0)
    assert float((mean_logit(y) > mean_logit(shuffled)).float().mean()) >= 0.8


def test_inversion_trace_descends(run, models):
    _, cfg, m = run
    G, E = models
    from jgseg.inversion import invert
    x, _ = m.split_arrays("test", 8)
    net = PerceptualNet(1, cfg.loss.perceptual_seed, cfg.loss.perceptual_channels)
    rising = []
    for r in invert(x, G, E, InversionConfig.from_run(cfg), net):
        avg = np.convolve(r.trace, np.ones(25) / 25, mode="valid")[50:]
        rising.append(round(float(np.mean(np.diff(avg) > 0)), 3))
    assert max(rising) <= 0.05, f"fraction of rising windows per image: {rising}"
