"""Two-stage training: adversarial generator/critic training, then the encoder with G frozen."""
from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional

import torch

from . import __version__
from .config import RunConfig, config_from_text
from .core import (AUX, ParameterStore, SeededRng, add_module, load_module, normal_sample, read_checkpoint,
                   save_checkpoint, stop_gradient)
from .critics import build_critics, encode_pair
from .data import DatasetManifest
from .encoder import Encoder, build_encoder
from .errors import ContractViolation, PreconditionError
from .generator import GeneratorConfig, JointGenerator, build_generator
from .objectives import (LossWeights, PerceptualNet, assert_stopped, d_logistic_loss, d_pair_loss, encoder_loss,
                         g_adv_term, r1_penalty)

log = logging.getLogger(__name__)

INIT_SEEDS = {"G": 101, "D": 202, "E": 303}


def _requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _add_optimizer(store: ParameterStore, prefix: str, opt: torch.optim.Optimizer) -> None:
    for idx, st in opt.state_dict()["state"].items():
        for key, value in st.items():
            store.add(f"{prefix}.{idx}.{key}", torch.as_tensor(value, dtype=torch.float32), AUX)


def _load_optimizer(store: ParameterStore, prefix: str, opt: torch.optim.Optimizer) -> None:
    sd = opt.state_dict()
    state: Dict[int, dict] = {}
    for name, arr in store.subset(prefix + ".").items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    sd["state"] = state
    opt.load_state_dict(sd)


def generator_store(G: JointGenerator, store: ParameterStore, prefix: str = "G", learnable: bool = True):
    add_module(store, prefix, G, G.group_of if learnable else AUX)


class GanTrainer:
    """Owns G, its EMA copy, D_r, D_m, their optimizers and the random streams."""

    def __init__(self, cfg: RunConfig, c_img: int, c_cls: int):
        self.cfg = cfg
        self.gcfg = GeneratorConfig.from_run(cfg, c_img, c_cls)
        self.c_img, self.c_cls = c_img, c_cls
        self.G = build_generator(self.gcfg, seed=cfg.seed * 1000 + INIT_SEEDS["G"])
        self.G_ema = copy.deepcopy(self.G).eval()
        _requires_grad(self.G_ema, False)
        self.D_r, self.D_m = build_critics(cfg.data.resolution, c_img, c_cls, cfg.disc,
                                           seed=cfg.seed * 1000 + INIT_SEEDS["D"])
        t = cfg.train
        betas = tuple(t.betas_gan)
        self.opt_G = torch.optim.Adam(self.G.parameters(), lr=t.lr_gan, betas=betas)
        self.opt_Dr = torch.optim.Adam(self.D_r.parameters(), lr=t.lr_gan, betas=betas)
        self.opt_Dm = torch.optim.Adam(self.D_m.parameters(), lr=t.lr_gan, betas=betas)
        self.rng_gan = SeededRng(cfg.seed, "gan")
        self.rng_data = SeededRng(cfg.seed, "data")
        self.step = 0
        self._warned_unlabeled = False

    # -- one optimization step ---------------------------------------------------
    def gan_step(self, batch_u: torch.Tensor, batch_l=None, image_term: bool = True) -> dict:
        """One D_r update, one D_m update, one G update (in that order)."""
        cfg = self.cfg
        kind = cfg.loss.gan_loss
        gamma = cfg.loss.gamma_r1
        z = normal_sample(self.rng_gan, (batch_u.shape[0], self.gcfg.d_z))
        img_f, seg_f = self.G(z, noise_mode="fresh", rng=self.rng_gan)
        stats = {}

        # D_r
        _requires_grad(self.D_r, True)
        real = batch_u.detach().clone().requires_grad_(True)
        l_dr = d_logistic_loss(self.D_r(real), self.D_r(img_f.detach()))
        r1 = r1_penalty(self.D_r, real, gamma) if gamma > 0 else torch.zeros(())
        self.opt_Dr.zero_grad(set_to_none=True)
        (l_dr + r1).backward()
        self.opt_Dr.step()
        stats["L_Dr"], stats["r1"] = float(l_dr.detach()), float(r1.detach())

        # D_m, real pairs from the labeled set only
        labeled = batch_l is not None and batch_l[0].shape[0] > 0
        if labeled:
            _requires_grad(self.D_m, True)
            x_l, y_l = batch_l
            real_img, real_probs = encode_pair(x_l, y_l, self.c_cls, cfg.disc.smooth_real)
            fake_probs = torch.softmax(seg_f.detach(), dim=1)
            l_dm = d_pair_loss(self.D_m(real_img, real_probs), self.D_m(img_f.detach(), fake_probs))
            loss = l_dm
            every = max(1, cfg.loss.r1_dm_every)
            if gamma > 0 and self.step % every == 0:
                r1_dm = r1_penalty(self.D_m, (real_img.clone().requires_grad_(True),
                                              real_probs.clone().requires_grad_(True)), gamma) * every
                loss = loss + r1_dm
                stats["r1_dm"] = float(r1_dm.detach())
            self.opt_Dm.zero_grad(set_to_none=True)
            loss.backward()
            self.opt_Dm.step()
            stats["L_Dm"] = float(l_dm.detach())
        elif not self._warned_unlabeled:
            log.warning("no labeled examples: skipping the D_m update and the pair term of the G loss")
            self._warned_unlabeled = True

        # G: the image enters D_m through stop_gradient
        _requires_grad(self.D_r, False)
        _requires_grad(self.D_m, False)
        loss_g = torch.zeros(())
        if image_term:
            loss_g = loss_g + g_adv_term(self.D_r(img_f), kind)
        if labeled:
            pair_maps = self.D_m(stop_gradient(img_f), torch.softmax(seg_f, dim=1))
            pair_term = g_adv_term(pair_maps, kind)
            if cfg.train.debug_checks:
                assert_stopped(pair_term, self.G.params_in("G.tImage"))
            loss_g = loss_g + pair_term
            stats["L_G_pair"] = float(pair_term.detach())
        self.opt_G.zero_grad(set_to_none=True)
        loss_g.backward()
        self.opt_G.step()
        _requires_grad(self.D_r, True)
        _requires_grad(self.D_m, True)
        stats["L_G"] = float(loss_g.detach())

        self.update_ema()
        self.step += 1
        return stats

    @torch.no_grad()
    def update_ema(self) -> None:
        decay = min(self.cfg.train.ema_decay, (1.0 + self.step) / (10.0 + self.step))
        for p_ema, p in zip(self.G_ema.parameters(), self.G.parameters()):
            p_ema.copy_(p.lerp(p_ema, decay))
        for b_ema, b in zip(self.G_ema.buffers(), self.G.buffers()):
            b_ema.copy_(b)

    # -- persistence ---------------------------------------------------------------
    def store(self) -> ParameterStore:
        s = ParameterStore()
        generator_store(self.G, s, "G")
        generator_store(self.G_ema, s, "G_ema", learnable=False)
        add_module(s, "D_r", self.D_r, "D_r")
        add_module(s, "D_m", self.D_m, "D_m")
        _add_optimizer(s, "opt.G", self.opt_G)
        _add_optimizer(s, "opt.D_r", self.opt_Dr)
        _add_optimizer(s, "opt.D_m", self.opt_Dm)
        return s

    def meta(self) -> dict:
        return {"kind": "gan", "step": self.step, "c_img": self.c_img, "c_cls": self.c_cls,
                "generator": dataclasses.asdict(self.gcfg), "version": __version__}

    def save(self, path) -> None:
        save_checkpoint(self.store(), path, run_config=self.cfg.to_yaml(),
                        rng_state={"gan": self.rng_gan.get_state(), "data": self.rng_data.get_state()},
                        meta=self.meta())

    @classmethod
    def from_checkpoint(cls, path, cfg: Optional[RunConfig] = None) -> "GanTrainer":
        ck = read_checkpoint(path)
        cfg = cfg or config_from_text(ck.run_config)
        tr = cls(cfg, ck.meta["c_img"], ck.meta["c_cls"])
        load_module(ck.store, "G", tr.G)
        load_module(ck.store, "G_ema", tr.G_ema)
        load_module(ck.store, "D_r", tr.D_r)
        load_module(ck.store, "D_m", tr.D_m)
        _load_optimizer(ck.store, "opt.G", tr.opt_G)
        _load_optimizer(ck.store, "opt.D_r", tr.opt_Dr)
        _load_optimizer(ck.store, "opt.D_m", tr.opt_Dm)
        tr.rng_gan.set_state(ck.rng_state["gan"])
        tr.rng_data.set_state(ck.rng_state["data"])
        tr.step = int(ck.meta["step"])
        return tr

    @torch.no_grad()
    def finalize_mean_style(self) -> None:
        n = self.cfg.train.w_avg_samples
        for net in (self.G, self.G_ema):
            net.w_avg.copy_(net.mean_style(n, SeededRng(self.cfg.seed, "wavg")))


def load_generator(path, which: str = "G_ema") -> JointGenerator:
    """Rebuild a frozen generator from a gan or encoder checkpoint."""
    ck = read_checkpoint(path)
    gcfg = GeneratorConfig(**ck.meta["generator"])
    G = JointGenerator(gcfg)
    load_module(ck.store, which, G)
    _requires_grad(G, False)
    return G.eval()


class _CsvLog:
    def __init__(self, path: Path, header: List[str], append: bool):
        self.path = path
        self.header = header
        fresh = not (append and path.exists())
        self.fh = open(path, "w" if fresh else "a", newline="")
        self.writer = csv.writer(self.fh)
        if fresh:
            self.writer.writerow(header)

    def row(self, values):
        self.writer.writerow(values)
        self.fh.flush()

    def close(self):
        self.fh.close()


def _pick(ids: List[int], size: int, rng: SeededRng) -> torch.Tensor:
    return torch.as_tensor(ids)[rng.randint(len(ids), size)]


def train_gan(cfg: RunConfig, manifest: DatasetManifest, out_dir, resume=None,
              on_sample: Optional[Callable] = None, stop_at: Optional[int] = None) -> Path:
    """Stage 1. Returns the path of the final checkpoint ``gan.ckpt``.

    ``resume`` continues from a checkpoint; ``stop_at`` ends early (without
    the final mean-style pass) so that resume equivalence can be tested.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not manifest.splits["unlabeled"] and not manifest.splits["labeled"]:
        raise PreconditionError("dataset has no training images (empty labeled and unlabeled splits)")
    tr = GanTrainer.from_checkpoint(resume, cfg) if resume else GanTrainer(cfg, manifest.c_img, manifest.c_cls)
    imgs, labels = manifest.arrays()
    lab_ids = manifest.splits["labeled"]
    pool = list(manifest.splits["unlabeled"])
    if cfg.train.dr_real_pool == "du+dl" or not pool:
        pool += lab_ids
    total = cfg.train.gan_steps if stop_at is None else min(stop_at, cfg.train.gan_steps)
    progress = _CsvLog(out_dir / "progress.csv", ["step", "L_Dr", "L_Dm", "L_G", "r1", "seconds"], resume is not None)
    losses = _CsvLog(out_dir / "losses.csv", ["step", "loss_name", "value"], resume is not None)
    t0 = time.time()
    try:
        while tr.step < total:
            bu = imgs[_pick(pool, cfg.train.batch_u, tr.rng_data)]
            bl = None
            if lab_ids:
                idx = _pick(lab_ids, cfg.train.batch_l, tr.rng_data)
                bl = (imgs[idx], labels[idx])
            stats = tr.gan_step(bu, bl)
            step = tr.step
            if step % cfg.train.log_every == 0 or step == total:
                progress.row([step, f"{stats['L_Dr']:.6f}", f"{stats.get('L_Dm', float('nan')):.6f}",
                              f"{stats['L_G']:.6f}", f"{stats['r1']:.6f}", f"{time.time() - t0:.2f}"])
                for k, v in stats.items():
                    losses.row([step, k, f"{v:.6f}"])
            if cfg.train.ckpt_every and step % cfg.train.ckpt_every == 0 and step < total:
                tr.save(out_dir / "gan_latest.ckpt")
            if on_sample is not None and cfg.train.sample_every and (step % cfg.train.sample_every == 0):
                on_sample(tr, step)
    finally:
        progress.close()
        losses.close()
    if stop_at is not None and total < cfg.train.gan_steps:
        path = out_dir / f"gan_step{total:06d}.ckpt"
        tr.save(path)
        return path
    tr.finalize_mean_style()
    path = out_dir / "gan.ckpt"
    tr.save(path)
    return path


# -- stage 2 -------------------------------------------------------------------------

class EncoderTrainer:
    def __init__(self, cfg: RunConfig, G: JointGenerator):
        self.cfg = cfg
        self.G = G
        _requires_grad(G, False)
        gcfg = G.cfg
        self.E = build_encoder(gcfg.resolution, gcfg.c_img, gcfg.n_levels, gcfg.d_w, cfg.enc,
                               seed=cfg.seed * 1000 + INIT_SEEDS["E"])
        with torch.no_grad():
            self.E.w_avg.copy_(G.w_avg)
        self.opt = torch.optim.Adam(self.E.parameters(), lr=cfg.train.lr_enc, betas=tuple(cfg.train.betas_enc))
        self.percept = PerceptualNet(gcfg.c_img, cfg.loss.perceptual_seed, cfg.loss.perceptual_channels)
        self.weights = LossWeights.from_run(cfg)
        self.rng = SeededRng(cfg.seed, "encoder")
        self.step = 0

    def enc_step(self, batch_l, batch_u) -> dict:
        total, parts = encoder_loss(batch_l, batch_u, self.G, self.E, self.weights, self.percept,
                                    self.cfg.loss.ce_reduction)
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()
        self.step += 1
        parts["L_E"] = float(total.detach())
        return parts

    @torch.no_grad()
    def val_lu(self, x: torch.Tensor) -> float:
        _, parts = encoder_loss(None, x, self.G, self.E, self.weights, self.percept)
        return parts["L_u"]

    def store(self) -> ParameterStore:
        s = ParameterStore()
        add_module(s, "E", self.E, "E")
        generator_store(self.G, s, "G_ema", learnable=False)
        _add_optimizer(s, "opt.E", self.opt)
        return s

    def meta(self, extra=None) -> dict:
        g = self.G.cfg
        m = {"kind": "encoder", "step": self.step, "c_img": g.c_img, "c_cls": g.c_cls,
             "generator": dataclasses.asdict(g),
             "encoder": {"resolution": g.resolution, "c_img": g.c_img, "n_levels": g.n_levels, "d_w": g.d_w,
                         "channels": list(self.cfg.enc.channels), "fpn_channels": self.cfg.enc.fpn_channels},
             "version": __version__}
        m.update(extra or {})
        return m

    def save(self, path, extra=None) -> None:
        save_checkpoint(self.store(), path, run_config=self.cfg.to_yaml(),
                        rng_state={"encoder": self.rng.get_state()}, meta=self.meta(extra))


def load_encoder(path) -> Encoder:
    ck = read_checkpoint(path)
    if ck.meta.get("kind") != "encoder":
        raise PreconditionError(f"{path} is not an encoder checkpoint")
    e = ck.meta["encoder"]
    E = Encoder(e["resolution"], e["c_img"], e["n_levels"], e["d_w"], e["channels"], e["fpn_channels"])
    load_module(ck.store, "E", E)
    _requires_grad(E, False)
    return E.eval()


def generator_digest(G: JointGenerator) -> str:
    s = ParameterStore()
    generator_store(G, s, "G")
    return s.digest()


def train_encoder(cfg: RunConfig, gan_checkpoint, manifest: DatasetManifest, out_dir) -> Path:
    """Stage 2: optimize E with the generator frozen; G must come out bit-identical."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not Path(gan_checkpoint).exists():
        raise PreconditionError(f"gan checkpoint not found: {gan_checkpoint}")
    G = load_generator(gan_checkpoint)
    before = generator_digest(G)
    tr = EncoderTrainer(cfg, G)
    imgs, labels = manifest.arrays()
    lab_ids = manifest.splits["labeled"]
    pool = list(manifest.splits["unlabeled"])
    val_ids = manifest.splits["val"] or pool[:32]
    x_val = imgs[torch.as_tensor(val_ids[:32])]
    val_start = tr.val_lu(x_val)
    progress = _CsvLog(out_dir / "enc_progress.csv", ["step", "L_E", "L_s", "L_u", "seconds"], False)
    t0 = time.time()
    try:
        while tr.step < cfg.train.enc_steps:
            bl = None
            if lab_ids:
                idx = _pick(lab_ids, cfg.train.batch_l, tr.rng)
                bl = (imgs[idx], labels[idx])
            bu = imgs[_pick(pool, cfg.train.batch_u, tr.rng)] if pool else None
            parts = tr.enc_step(bl, bu)
            if tr.step % cfg.train.log_every == 0 or tr.step == cfg.train.enc_steps:
                progress.row([tr.step, f"{parts['L_E']:.6f}", f"{parts['L_s']:.6f}", f"{parts['L_u']:.6f}",
                              f"{time.time() - t0:.2f}"])
    finally:
        progress.close()
    val_end = tr.val_lu(x_val)
    after = generator_digest(G)
    if before != after:
        raise ContractViolation("generator parameters changed during encoder training")
    path = out_dir / "encoder.ckpt"
    tr.save(path, {"gan_digest": before, "val_L_u_start": val_start, "val_L_u_end": val_end})
    return path
