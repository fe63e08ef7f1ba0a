"""Run configuration: nested dataclasses, YAML files and ``key=value`` overrides.

Precedence is defaults <- file <- overrides. Every key is namespaced by its
section (``data.k``, ``train.gan_steps`` ...); unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import yaml

from .errors import ConfigError


@dataclass
class DataConfig:
    recipe: str = "BLOBS-A"
    resolution: int = 64
    count: int = 2400
    k: int = 25
    n: int = 2000
    val: int = 64
    test: int = 200
    split_seed: int = 0
    enforce_scarcity: bool = True
    # empty -> the recipe's canonical out-of-domain partner
    shift: list = field(default_factory=list)
    manifest: Optional[str] = None
    shifted_manifest: Optional[str] = None


@dataclass
class GenConfig:
    channels: Optional[list] = None
    d_z: int = 64
    d_w: int = 128
    mapping_layers: int = 4
    mapping_width: int = 128
    mapping_lr_mul: float = 0.01
    noise: bool = True
    base_resolution: int = 4
    path_length_reg: bool = False


@dataclass
class DiscConfig:
    channels: Optional[list] = None
    dm_scales: int = 2
    dm_layers: int = 4
    dm_channels: int = 64
    smooth_real: float = 0.0


@dataclass
class EncConfig:
    channels: list = field(default_factory=lambda: [32, 64, 128, 128])
    fpn_channels: int = 64


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.1
    gamma_r1: float = 10.0
    dice_eps: float = 1.0
    ce_reduction: str = "mean"
    gan_loss: str = "nonsaturating"
    r1_dm_every: int = 16
    perceptual_seed: int = 1234
    perceptual_channels: list = field(default_factory=lambda: [16, 32, 64])


@dataclass
class TrainConfig:
    gan_steps: int = 20000
    enc_steps: int = 5000
    batch_u: int = 16
    batch_l: int = 8
    lr_gan: float = 2e-3
    lr_enc: float = 1e-4
    betas_gan: list = field(default_factory=lambda: [0.0, 0.99])
    betas_enc: list = field(default_factory=lambda: [0.9, 0.999])
    ema_decay: float = 0.999
    ckpt_every: int = 1000
    sample_every: int = 5000
    log_every: int = 10
    dr_real_pool: str = "du+dl"
    w_avg_samples: int = 10000
    debug_checks: bool = False


@dataclass
class InvertConfig:
    steps: int = 300
    lr: float = 0.05
    lr_final: float = 0.005
    consistency_every: int = 1
    clip: float = 10.0
    batch: int = 50
    noise_mode: str = "zero"


@dataclass
class EvalConfig:
    split: str = "test"
    metric: str = "auto"
    baseline_epochs: int = 200
    baseline_batch: int = 8
    baseline_lr: float = 1e-3
    baseline_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    distill_synth: int = 5000
    distill_epochs: int = 4
    distill_psi: float = 0.7
    ablation_k: list = field(default_factory=lambda: [5, 100])
    ablation_n: list = field(default_factory=lambda: [200, 2000])
    ablation_gan_steps: int = 5000
    ablation_enc_steps: int = 1500
    ablation_test: int = 100
    lambda2_sweep: list = field(default_factory=lambda: [0.0, 0.1, 1.0])
    sample_count: int = 16
    sample_psi: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)
    enc: EncConfig = field(default_factory=EncConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    invert: InvertConfig = field(default_factory=InvertConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def validate(self) -> "RunConfig":
        positive = {
            "train.gan_steps": self.train.gan_steps >= 0,
            "train.enc_steps": self.train.enc_steps >= 0,
            "train.batch_u": self.train.batch_u > 0,
            "train.batch_l": self.train.batch_l > 0,
            "invert.steps": self.invert.steps >= 0,
            "data.resolution": self.data.resolution >= 8 and self.data.resolution & (self.data.resolution - 1) == 0,
        }
        for key, ok in positive.items():
            if not ok:
                raise ConfigError(f"invalid value for {key}")
        for key in ("lambda1", "lambda2", "lambda3", "gamma_r1", "dice_eps"):
            if getattr(self.loss, key) < 0:
                raise ConfigError(f"loss.{key} must be >= 0")
        if self.loss.ce_reduction not in ("sum", "mean"):
            raise ConfigError("loss.ce_reduction must be 'sum' or 'mean'")
        if self.loss.gan_loss not in ("nonsaturating", "minimax"):
            raise ConfigError("loss.gan_loss must be 'nonsaturating' or 'minimax'")
        if self.train.dr_real_pool not in ("du", "du+dl"):
            raise ConfigError("train.dr_real_pool must be 'du' or 'du+dl'")
        return self


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in d.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _check_type(key: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"type mismatch for {key}: expected bool, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"type mismatch for {key}: expected int, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"type mismatch for {key}: expected float, got {value!r}")
        return float(value)
    if not isinstance(value, type(default)):
        raise ConfigError(f"type mismatch for {key}: expected {type(default).__name__}, got {value!r}")
    return value


def _merge(flat: dict, updates: dict, source: str) -> None:
    for key, value in updates.items():
        if key not in flat:
            raise ConfigError(f"unknown config key {key!r} (from {source})")
        flat[key] = _check_type(key, flat[key], value)


def _build(flat: dict) -> RunConfig:
    sections = {}
    top = {}
    for key, value in flat.items():
        if "." in key:
            section, name = key.split(".", 1)
            sections.setdefault(section, {})[name] = value
        else:
            top[key] = value
    kwargs = dict(top)
    for f in dataclasses.fields(RunConfig):
        if f.name in sections:
            kwargs[f.name] = f.default_factory(**sections[f.name])
    return RunConfig(**kwargs)


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key}: {exc}") from exc
    return key.strip(), value


def resolve_config(path=None, overrides: Sequence[str] = (), base: Optional[RunConfig] = None) -> RunConfig:
    """Defaults (or ``base``) <- YAML file at ``path`` <- ``key=value`` overrides."""
    flat = _flatten((base or RunConfig()).to_dict())
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        _merge(flat, _flatten(loaded), str(p))
    parsed = dict(parse_override(o) for o in overrides)
    _merge(flat, parsed, "--set")
    return _build(flat).validate()


def config_from_text(text: str) -> RunConfig:
    loaded = yaml.safe_load(text) or {}
    flat = _flatten(RunConfig().to_dict())
    _merge(flat, _flatten(loaded), "embedded config")
    return _build(flat)


def default_channels(resolution: int, base: int = 4, cap: int = 128, budget: int = 2048) -> List[int]:
    levels = []
    res = base
    while res <= resolution:
        levels.append(max(8, min(cap, budget // res)))
        res *= 2
    return levels
