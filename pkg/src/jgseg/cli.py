"""Command-line entry point: ``jgseg <subcommand> [--config F] [--set k=v ...] [--run-name N] [--seed S]``.

Every subcommand writes into ``<runs>/<run-name>/<subcommand>/`` together with
the resolved config and the code version. Failures end with one JSON line on
stderr and exit 2 (config), 3 (missing prerequisite) or 4 (failed run).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import __version__
from .config import RunConfig, resolve_config
from .data import (OOD_PARTNERS, DatasetManifest, apply_shift, generate_dataset, make_recipe, read_png, split,
                   to_model, to_uint8, write_png)
from .errors import ConfigError, JGSegError, PreconditionError
from .evaluation import (EvalReport, BaselineSegmenter, encoder_segmenter, evaluate_model, inversion_segmenter,
                         run_distillation, run_label_ablation, run_lambda2_sweep, train_baseline)
from .figures import colorize, plot_bars, plot_series, save_grid, save_pair_grid
from .generator import sample_pairs
from .core import SeededRng
from .inversion import InversionConfig, invert
from .objectives import PerceptualNet

log = logging.getLogger("jgseg")

SUBCOMMANDS = ("make-data", "train-gan", "train-encoder", "infer", "evaluate", "sample", "distill", "ablate",
               "baseline", "report")


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def runs_root() -> Path:
    return Path(os.environ.get("JGSEG_RUNS_DIR", "runs"))


class RunContext:
    def __init__(self, name: str, cfg: RunConfig, subcommand: str):
        self.name = name
        self.cfg = cfg
        self.root = runs_root() / name
        self.out = self.root / subcommand
        self.subcommand = subcommand

    def prepare(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        cfg_path = self.out / "config.yaml"
        if cfg_path.exists():
            os.chmod(cfg_path, 0o644)
        cfg_path.write_text(self.cfg.to_yaml())
        os.chmod(cfg_path, 0o444)
        (self.out / "VERSION").write_text(code_version() + "\n")
        return self.out

    # prerequisite lookup
    def manifest(self) -> DatasetManifest:
        path = self.cfg.data.manifest or self.root / "make-data" / "data"
        if not (Path(path) / "manifest.json").exists() and not str(path).endswith(".json"):
            raise PreconditionError(f"missing dataset manifest {Path(path) / 'manifest.json'} (run make-data first)")
        return DatasetManifest.load(path)

    def shifted_manifest(self, base: Optional[DatasetManifest] = None) -> DatasetManifest:
        path = self.cfg.data.shifted_manifest or self.root / "make-data" / "shifted"
        if not (Path(path) / "manifest.json").exists() and not str(path).endswith(".json"):
            raise PreconditionError(f"missing shifted dataset {Path(path) / 'manifest.json'} (run make-data first)")
        m = DatasetManifest.load(path)
        if base is not None:
            # keep the splits of the in-domain manifest (items are index-aligned)
            m = DatasetManifest(m.root, m.recipe, m.items, base.splits)
        return m

    def artifact(self, explicit: Optional[str], default: Path, what: str) -> Path:
        path = Path(explicit) if explicit else default
        if not path.exists():
            raise PreconditionError(f"missing {what}: {path}")
        return path

    def gan_ckpt(self, explicit=None) -> Path:
        return self.artifact(explicit, self.root / "train-gan" / "gan.ckpt", "GAN checkpoint")

    def enc_ckpt(self, explicit=None) -> Path:
        return self.artifact(explicit, self.root / "train-encoder" / "encoder.ckpt", "encoder checkpoint")


@contextmanager
def run_lock(root: Path):
    """Exclusive lock on a run directory; a lock left by a dead process is reclaimed."""
    root.mkdir(parents=True, exist_ok=True)
    lock = root / ".lock"
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _alive(pid):
                raise PreconditionError(f"run directory {root} is locked by process {pid}; use another --run-name")
            lock.unlink(missing_ok=True)
    else:
        raise PreconditionError(f"cannot acquire lock {lock}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# -- subcommands ---------------------------------------------------------------

def cmd_make_data(ctx: RunContext, args) -> None:
    d = ctx.cfg.data
    out = ctx.prepare()
    recipe = make_recipe(d.recipe, d.resolution, seed=ctx.cfg.seed)
    m = generate_dataset(recipe, d.count, out / "data")
    m = split(m, d.k, d.n, d.val, d.test, d.split_seed, d.enforce_scarcity)
    shifts = d.shift or OOD_PARTNERS[d.recipe]
    s = apply_shift(m, shifts, out / "shifted")
    imgs, labels = m.split_arrays("labeled", 16)
    save_pair_grid([x.numpy() for x in imgs], [y.numpy() for y in labels], out / "labeled_examples.png")
    simgs, _ = s.split_arrays("labeled", 16)
    save_grid([x.numpy() for x in simgs], out / "shifted_examples.png", scale=2)
    print(f"items,{len(m.items)}")
    for name, ids in m.splits.items():
        print(f"{name},{len(ids)}")


def cmd_train_gan(ctx: RunContext, args) -> None:
    from .training import train_gan

    m = ctx.manifest()
    out = ctx.prepare()
    n = ctx.cfg.eval.sample_count

    def on_sample(tr, step):
        pairs = sample_pairs(tr.G_ema, n, 1.0, SeededRng(ctx.cfg.seed, "preview"))
        save_pair_grid([p[0] for p in pairs], [p[1] for p in pairs], out / f"samples_{step:06d}.png")

    resume = args.resume
    if resume is None and (out / "gan_latest.ckpt").exists() and args.auto_resume:
        resume = out / "gan_latest.ckpt"
    path = train_gan(ctx.cfg, m, out, resume=resume, on_sample=on_sample)
    print(f"checkpoint,{path}")


def cmd_train_encoder(ctx: RunContext, args) -> None:
    from .training import train_encoder

    m = ctx.manifest()
    gan = ctx.gan_ckpt(args.gan_ckpt)
    out = ctx.prepare()
    path = train_encoder(ctx.cfg, gan, m, out)
    print(f"checkpoint,{path}")


def _load_models(ctx: RunContext, args):
    from .training import load_encoder, load_generator

    gan = ctx.gan_ckpt(getattr(args, "gan_ckpt", None))
    enc = ctx.enc_ckpt(getattr(args, "encoder_ckpt", None))
    return load_generator(gan), load_encoder(enc)


def _infer_inputs(ctx: RunContext, args):
    if args.input:
        p = Path(args.input)
        if not p.exists():
            raise PreconditionError(f"missing input {p}")
        files = sorted(p.glob("*.png")) if p.is_dir() else [p]
        if not files:
            raise PreconditionError(f"no PNG images in {p}")
        xs = [torch.from_numpy(to_model(read_png(f))) for f in files[:args.limit]]
        return [f.stem for f in files[:args.limit]], torch.stack(xs)
    m = ctx.shifted_manifest(ctx.manifest()) if args.domain == "out" else ctx.manifest()
    x, _ = m.split_arrays(ctx.cfg.eval.split, args.limit)
    ids = m.splits[ctx.cfg.eval.split][:args.limit]
    return [f"{i:06d}" for i in ids], x


def cmd_infer(ctx: RunContext, args) -> None:
    G, E = _load_models(ctx, args)
    names, x = _infer_inputs(ctx, args)
    if x.shape[1:] != (G.cfg.c_img, G.cfg.resolution, G.cfg.resolution):
        raise PreconditionError(f"inputs have shape {tuple(x.shape[1:])}, model expects "
                                f"{(G.cfg.c_img, G.cfg.resolution, G.cfg.resolution)}")
    out = ctx.prepare()
    cfg = InversionConfig.from_run(ctx.cfg)
    net = PerceptualNet(G.cfg.c_img, ctx.cfg.loss.perceptual_seed, ctx.cfg.loss.perceptual_channels)
    results = invert(x, G, E, cfg, net)
    print("name,final_loss,final_mse")
    for name, r in zip(names, results):
        write_png(out / f"{name}_label.png", r.labels.numpy().astype(np.uint8))
        write_png(out / f"{name}_label_color.png", colorize(r.labels.numpy()))
        write_png(out / f"{name}_recon.png", to_uint8(r.image.numpy()))
        with open(out / f"{name}_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for t, v in enumerate(r.trace):
                w.writerow([t, repr(v)])
        print(f"{name},{r.trace[-1]:.6f},{r.final_error:.6f}")


def _baseline_model(path: Path) -> BaselineSegmenter:
    state = torch.load(path, map_location="cpu", weights_only=False)
    model = BaselineSegmenter(state["c_img"], state["c_cls"], state["channels"])
    model.load_state_dict(state["state"])
    return model.eval()


def cmd_evaluate(ctx: RunContext, args) -> None:
    m = ctx.manifest()
    target = ctx.shifted_manifest(m) if args.domain == "out" else m
    if args.lambda2_sweep:
        G, E = _load_models(ctx, args)
        ctx.out = ctx.out / (args.tag or f"lambda2-sweep-{args.domain}")
        out = ctx.prepare()
        rows = run_lambda2_sweep(ctx.cfg, G, E, target, out, limit=args.limit, domain=args.domain)
        _print_rows(rows, ["lambda2", "domain", "metric", "value", "median", "n"])
        return
    extra = {"method": args.method, "domain": args.domain}
    if args.method in ("ours", "ours-no"):
        from .core import read_checkpoint

        gan = ctx.gan_ckpt(args.gan_ckpt)
        enc = ctx.enc_ckpt(args.encoder_ckpt)
        G, E = _load_models(ctx, args)
        extra["gan_step"] = read_checkpoint(gan).meta.get("step")
        extra["enc_step"] = read_checkpoint(enc).meta.get("step")
        if args.method == "ours":
            seg = inversion_segmenter(G, E, InversionConfig.from_run(ctx.cfg),
                                      PerceptualNet(G.cfg.c_img, ctx.cfg.loss.perceptual_seed,
                                                    ctx.cfg.loss.perceptual_channels))
        else:
            seg = encoder_segmenter(G, E)
    else:
        path = ctx.artifact(args.baseline_ckpt, ctx.root / "baseline" / "baseline.pt", "baseline checkpoint")
        seg = _baseline_model(path).predict
    ctx.out = ctx.out / (args.tag or f"{args.method}-{args.domain}")
    out = ctx.prepare()
    rep = evaluate_model(seg, target, ctx.cfg.eval.split, ctx.cfg.eval.metric, limit=args.limit)
    rep.extra.update(extra)
    rep.write(out)
    print("method,domain,metric,mean,median,n")
    print(f"{args.method},{args.domain},{rep.metric},{rep.value:.6f},{rep.median[rep.metric]:.6f},{rep.n_items}")


def cmd_sample(ctx: RunContext, args) -> None:
    from .training import load_generator

    G = load_generator(ctx.gan_ckpt(args.gan_ckpt))
    out = ctx.prepare()
    e = ctx.cfg.eval
    count = args.count or e.sample_count
    psi = e.sample_psi if args.psi is None else args.psi
    pairs = sample_pairs(G, count, psi, SeededRng(ctx.cfg.seed, "sample"))
    for i, (img, lbl) in enumerate(pairs):
        write_png(out / f"sample_{i:06d}_img.png", to_uint8(img))
        write_png(out / f"sample_{i:06d}_lbl.png", lbl)
    save_pair_grid([p[0] for p in pairs[:64]], [p[1] for p in pairs[:64]], out / "grid.png")
    print(f"samples,{count}\npsi,{psi}")


def cmd_distill(ctx: RunContext, args) -> None:
    from .training import load_generator

    m = ctx.manifest()
    s = ctx.shifted_manifest(m)
    G = load_generator(ctx.gan_ckpt(args.gan_ckpt))
    out = ctx.prepare()
    rows = run_distillation(ctx.cfg, G, m, s, out, synth_count=args.synth_count)
    _print_rows(rows, ["strategy", "synth_count", "real_k", "metric", "value_in", "value_out"])


def cmd_ablate(ctx: RunContext, args) -> None:
    m = ctx.manifest()
    s = ctx.shifted_manifest(m)
    out = ctx.prepare()
    rows = run_label_ablation(ctx.cfg, m, s, out)
    _print_rows(rows, ["k", "n", "status", "metric", "value_in", "value_out"])


def cmd_baseline(ctx: RunContext, args) -> None:
    m = ctx.manifest()
    s = ctx.shifted_manifest(m)
    out = ctx.prepare()
    e = ctx.cfg.eval
    model, hist = train_baseline(m, args.k, e.baseline_epochs, e.baseline_batch, e.baseline_lr, ctx.cfg.seed,
                                 e.baseline_channels)
    torch.save({"state": model.state_dict(), "c_img": model.c_img, "c_cls": model.c_cls,
                "channels": model.channels}, out / "baseline.pt")
    with open(out / "train_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows([i + 1, repr(v)] for i, v in enumerate(hist))
    print("domain,metric,mean,median,n")
    for dom, man in (("in", m), ("out", s)):
        rep = evaluate_model(model.predict, man, e.split, e.metric)
        rep.extra.update(method="baseline", domain=dom)
        rep.write(out / dom)
        print(f"{dom},{rep.metric},{rep.value:.6f},{rep.median[rep.metric]:.6f},{rep.n_items}")


def _read_csv(path: Path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(ctx: RunContext, args) -> None:
    if not ctx.root.exists():
        raise PreconditionError(f"run directory {ctx.root} does not exist")
    reports = sorted(p for p in ctx.root.rglob("report.json") if ctx.subcommand not in p.parts)
    if not reports:
        raise PreconditionError(f"no report.json under {ctx.root} (run evaluate first)")
    out = ctx.prepare()
    rows = []
    for p in reports:
        rep = EvalReport.from_json(p.read_text())
        rows.append({"source": str(p.parent.relative_to(ctx.root)), "method": rep.extra.get("method", ""),
                     "domain": rep.extra.get("domain", ""), "split": rep.split, "metric": rep.metric,
                     "n": rep.n_items, "dice": rep.mean["dice"], "jc": rep.mean["jc"], "miou": rep.mean["miou"],
                     "median": rep.median[rep.metric], "gan_step": rep.extra.get("gan_step", "")})
    header = ["source", "method", "domain", "split", "metric", "n", "dice", "jc", "miou", "median", "gan_step"]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        w.writerows(rows)
    _print_rows(rows, header)
    plot_bars([r["source"] for r in rows], [float(r[r["metric"]]) for r in rows], out / "summary.png",
              ylabel="mean metric")
    # metric against the GAN step of the evaluated checkpoint
    stepped = {}
    for r in rows:
        if r["gan_step"] not in ("", None):
            stepped.setdefault(f"{r['method']}-{r['domain']}", []).append((int(r["gan_step"]), float(r[r["metric"]])))
    if stepped:
        plot_series({k: ([a for a, _ in sorted(v)], [b for _, b in sorted(v)]) for k, v in stepped.items()},
                    out / "metric_vs_step.png", ylabel="mean metric")
    _protocol_figures(ctx.root, out)
    prog = ctx.root / "train-gan" / "progress.csv"
    if prog.exists():
        data = _read_csv(prog)
        if data:
            steps = [int(d["step"]) for d in data]
            plot_series({k: (steps, [float(d[k]) for d in data]) for k in ("L_Dr", "L_Dm", "L_G")},
                        out / "gan_losses.png", ylabel="loss")
    enc = ctx.root / "train-encoder" / "enc_progress.csv"
    if enc.exists():
        data = _read_csv(enc)
        if data:
            steps = [int(d["step"]) for d in data]
            plot_series({k: (steps, [float(d[k]) for d in data]) for k in ("L_s", "L_u")},
                        out / "encoder_losses.png", ylabel="loss", logy=True)


def _protocol_figures(root: Path, out: Path) -> None:
    """Figures for the distillation, ablation and lambda2-sweep tables found under the run."""
    dist = root / "distill" / "distillation.csv"
    if dist.exists():
        rows = _read_csv(dist)
        plot_bars([f"{r['strategy']} ({d})" for r in rows for d in ("in", "out") if r.get(f"value_{d}")],
                  [float(r[f"value_{d}"]) for r in rows for d in ("in", "out") if r.get(f"value_{d}")],
                  out / "distillation.png", ylabel=rows[0]["metric"] if rows else "metric")
    abl = root / "ablate" / "ablation.csv"
    if abl.exists():
        ok = [r for r in _read_csv(abl) if r["status"] == "ok"]
        series = {}
        for n in sorted({int(r["n"]) for r in ok}):
            cells = sorted((int(r["k"]), float(r["value_in"])) for r in ok if int(r["n"]) == n)
            series[f"n={n}"] = ([c[0] for c in cells], [c[1] for c in cells])
        if series:
            plot_series(series, out / "ablation.png", xlabel="labeled k", ylabel=ok[0]["metric"])
    sweeps = {}
    for path in sorted(root.glob("evaluate/*/lambda2_sweep.csv")):
        for r in _read_csv(path):
            sweeps.setdefault(r["domain"], []).append((float(r["lambda2"]), float(r["value"])))
    if sweeps:
        plot_series({d: ([a for a, _ in sorted(v)], [b for _, b in sorted(v)]) for d, v in sweeps.items()},
                    out / "lambda2_sweep.png", xlabel="lambda2", ylabel="mean metric")


def _print_rows(rows: List[dict], header: List[str]) -> None:
    print(",".join(header))
    for r in rows:
        cells = []
        for h in header:
            v = r.get(h, "")
            cells.append(f"{v:.6f}" if isinstance(v, float) else str(v))
        print(",".join(cells))


COMMANDS = {
    "make-data": cmd_make_data, "train-gan": cmd_train_gan, "train-encoder": cmd_train_encoder,
    "infer": cmd_infer, "evaluate": cmd_evaluate, "sample": cmd_sample, "distill": cmd_distill,
    "ablate": cmd_ablate, "baseline": cmd_baseline, "report": cmd_report,
}


# -- argument parsing ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--run-name", default="default", help="run directory name under the runs root")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="jgseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    sps = {name: sub.add_parser(name, parents=[common]) for name in SUBCOMMANDS}
    sps["train-gan"].add_argument("--resume", help="continue from this GAN checkpoint")
    sps["train-gan"].add_argument("--auto-resume", action="store_true", help="resume from gan_latest.ckpt if present")
    for name in ("train-encoder", "infer", "evaluate", "sample", "distill"):
        sps[name].add_argument("--gan-ckpt")
    for name in ("infer", "evaluate"):
        sps[name].add_argument("--encoder-ckpt")
        sps[name].add_argument("--domain", choices=("in", "out"), default="in")
        sps[name].add_argument("--limit", type=int)
    sps["infer"].add_argument("--input", help="PNG file or directory (default: the eval split of the run's data)")
    sps["evaluate"].add_argument("--method", choices=("ours", "ours-no", "baseline"), default="ours")
    sps["evaluate"].add_argument("--baseline-ckpt")
    sps["evaluate"].add_argument("--tag", help="output subdirectory (default METHOD-DOMAIN)")
    sps["evaluate"].add_argument("--lambda2-sweep", action="store_true",
                                 help="score inversion at every eval.lambda2_sweep value instead")
    sps["sample"].add_argument("--count", type=int)
    sps["sample"].add_argument("--psi", type=float)
    sps["distill"].add_argument("--synth-count", type=int)
    sps["baseline"].add_argument("--k", type=int, help="labeled items to use (default: the whole labeled split)")
    return p


def _error_tail(exc: BaseException, code: int) -> None:
    print(json.dumps({"status": "error", "exit": code, "kind": type(exc).__name__,
                      "message": str(exc).replace("\n", " ")}), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = resolve_config(args.config, overrides)
        ctx = RunContext(args.run_name, cfg, args.subcommand)
        t0 = time.time()
        with run_lock(ctx.root):
            COMMANDS[args.subcommand](ctx, args)
        log.info("%s finished in %.1fs", args.subcommand, time.time() - t0)
        return 0
    except JGSegError as exc:
        _error_tail(exc, exc.exit_code)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - any other failure is a failed run
        _error_tail(exc, 4)
        return 4


if __name__ == "__main__":
    sys.exit(main())
