"""Experiment configuration file: one YAML document aggregating every sub-config.

Schema (all keys optional, unknown keys rejected)::

    preset: layers            # boxes | spheres | layers
    gt_count: 600             # Gaussians in the ground-truth scene
    size: 64                  # image side in pixels
    seed: 0                   # root seed; drives init, priors, sampling, patches
    trajectory_steps: 20
    out_dir: runs/default
    noise:   {base_sigma, regions: [{rect: [x0, y0, x1, y1], sigma}], bias_amplitude, bias_frequency}
    train:   TrainConfig fields except seed
    loss:    {lambda_ssim, lambda1, lambda2, lambda3, dn_patch_side, K, gamma_reserved}
    sampler: {tau, n, deterministic}
    ot:      {mode, cost_exponent, epsilon, s1, s2, solver}
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .core import ConfigError
from .losses import LossConfig, OTConfig
from .priors import PRESETS, NoiseProfile
from .sampler import SamplerConfig
from .trainer import TrainConfig

_TOP = ("preset", "gt_count", "size", "seed", "trajectory_steps", "out_dir",
        "noise", "train", "loss", "sampler", "ot")


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "layers"
    gt_count: int = 600
    size: int = 64
    seed: int = 0
    trajectory_steps: int = 20
    out_dir: str = "runs/default"
    noise: NoiseProfile = field(default_factory=NoiseProfile.two_region)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; valid presets: {', '.join(PRESETS)}")
        if int(self.size) < 16:
            raise ConfigError("size must be >= 16")
        if int(self.trajectory_steps) < 1:
            raise ConfigError("trajectory_steps must be >= 1")

    def train_config(self, **overrides):
        return replace(self.train, seed=int(self.seed), **overrides)

    def loss_config(self):
        return replace(self.loss, sampler=replace(self.loss.sampler, seed=int(self.seed)))

    def to_dict(self):
        tr = {f.name: _plain(getattr(self.train, f.name)) for f in dataclasses.fields(TrainConfig)
              if f.name != "seed"}
        loss = {f.name: getattr(self.loss, f.name) for f in dataclasses.fields(LossConfig)
                if f.name not in ("sampler", "ot")}
        sm = self.loss.sampler
        return {
            "preset": self.preset, "gt_count": int(self.gt_count), "size": int(self.size),
            "seed": int(self.seed), "trajectory_steps": int(self.trajectory_steps),
            "out_dir": str(self.out_dir),
            "noise": self.noise.to_dict(),
            "train": tr,
            "loss": loss,
            "sampler": {"tau": sm.tau, "n": sm.n, "deterministic": sm.deterministic},
            "ot": dataclasses.asdict(self.loss.ot),
        }

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _build(cls, d, what, exclude=()):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError(f"section {what!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    extra = set(d) - names
    if extra:
        raise ConfigError(f"unknown key(s) in {what}: {sorted(extra)}")
    try:
        return cls(**{k: _tuplify(v) for k, v in d.items()})
    except TypeError as err:
        raise ConfigError(f"bad value in {what}: {err}") from err


def config_from_dict(d) -> ExperimentConfig:
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError("config file must be a mapping")
    extra = set(d) - set(_TOP)
    if extra:
        raise ConfigError(f"unknown top-level key(s): {sorted(extra)}")
    noise_d = d.get("noise")
    if noise_d is None:
        noise = NoiseProfile.two_region()
    else:
        if not isinstance(noise_d, dict):
            raise ConfigError("section 'noise' must be a mapping")
        regions = noise_d.get("regions", [])
        for r in regions:
            if not isinstance(r, dict) or set(r) - {"rect", "sigma"}:
                raise ConfigError(f"bad noise region {r!r}; expected keys rect, sigma")
        noise = _build(NoiseProfile, {**noise_d, "regions": [dict(r) for r in regions]}, "noise")
    sampler = _build(SamplerConfig, d.get("sampler"), "sampler", exclude=("seed", "tau_schedule"))
    ot = _build(OTConfig, d.get("ot"), "ot")
    loss = _build(LossConfig, d.get("loss"), "loss", exclude=("sampler", "ot"))
    loss = replace(loss, sampler=sampler, ot=ot)
    train = _build(TrainConfig, d.get("train"), "train", exclude=("seed",))
    top = {k: d[k] for k in ("preset", "gt_count", "size", "seed", "trajectory_steps", "out_dir")
           if k in d}
    return ExperimentConfig(noise=noise, train=train, loss=loss, **top)


def apply_overrides(d, overrides):
    """Apply ``key.sub=value`` strings; values are parsed as YAML scalars/lists."""
    d = dict(d or {})
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = {}
            elif not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node[p] = dict(nxt)
            node = node[p]
        node[parts[-1]] = yaml.safe_load(raw)
    return d


def load_config(path=None, overrides=()) -> ExperimentConfig:
    d = {}
    if path is not None:
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: invalid YAML: {err}") from err
    return config_from_dict(apply_overrides(d, overrides))
