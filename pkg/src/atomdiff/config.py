"""Run configuration: one declarative tree, loadable from YAML/JSON, with dotted overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from atomdiff.datasets import DEFAULT_N_MAX

# (d_model, n_heads, n_layers)
DIT_PRESETS = {
    "XS": (64, 4, 4),
    "S": (384, 6, 12),
    "B": (768, 12, 12),
    # the published DiT-L uses 16 heads; 1024 is not divisible by 24
    "L": (1024, 16, 24),
}


LR_SCHEDULES = ("constant", "cosine")


class ConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    """Reconstruction weights (atom types, cart, frac, lattice lengths, lattice angles)."""

    periodic: tuple[float, float, float, float, float] = (1.0, 0.0, 10.0, 1.0, 10.0)
    non_periodic: tuple[float, float, float, float, float] = (1.0, 10.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        self.periodic = tuple(float(x) for x in self.periodic)
        self.non_periodic = tuple(float(x) for x in self.non_periodic)
        if len(self.periodic) != 5 or len(self.non_periodic) != 5:
            raise ConfigError("loss weight rows need 5 entries")
        if min(self.periodic + self.non_periodic) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class VAEConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ff_mult: int = 4
    latent_dim: int = 8
    kl_weight: float = 1e-5
    corrupt_prob: float = 0.1
    corrupt_std: float = 0.1
    lr: float = 1e-4
    lr_schedule: str = "constant"
    batch_size: int = 256
    epochs: int = 200
    augment: bool = True
    weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class DiTConfig:
    preset: str = "XS"
    d_model: int | None = None
    n_heads: int | None = None
    n_layers: int | None = None
    ff_mult: int = 4
    lr: float = 1e-4
    lr_schedule: str = "constant"
    batch_size: int = 256
    epochs: int = 200
    ema_decay: float = 0.9999
    label_dropout: float = 0.1
    self_cond_prob: float = 0.5
    t_min: float = 0.01
    t_clip: float = 0.9
    augment: bool = True

    def dims(self) -> tuple[int, int, int]:
        if self.preset not in DIT_PRESETS:
            raise ConfigError(f"unknown DiT preset {self.preset!r}; choose from {sorted(DIT_PRESETS)}")
        d, h, l = DIT_PRESETS[self.preset]
        return (self.d_model or d, self.n_heads or h, self.n_layers or l)


@dataclass
class SamplingConfig:
    steps: int = 500
    guidance: float = 1.0
    num_samples: int = 16
    use_ema: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    n_max: int = DEFAULT_N_MAX
    include_hydrogens: bool = True
    train_data: str | None = None
    out_dir: str = "runs"
    vae: VAEConfig = field(default_factory=VAEConfig)
    dit: DiTConfig = field(default_factory=DiTConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    def validate(self) -> "RunConfig":
        positive = {
            "n_max": self.n_max,
            "vae.d_model": self.vae.d_model,
            "vae.latent_dim": self.vae.latent_dim,
            "vae.lr": self.vae.lr,
            "vae.batch_size": self.vae.batch_size,
            "dit.lr": self.dit.lr,
            "dit.batch_size": self.dit.batch_size,
            "sampling.steps": self.sampling.steps,
        }
        for k, v in positive.items():
            if v <= 0:
                raise ConfigError(f"{k} must be positive")
        for k, v in {"vae.epochs": self.vae.epochs, "dit.epochs": self.dit.epochs,
                     "vae.kl_weight": self.vae.kl_weight, "sampling.guidance": self.sampling.guidance}.items():
            if v < 0:
                raise ConfigError(f"{k} must be non-negative")
        if not 0 <= self.dit.ema_decay <= 1:
            raise ConfigError("dit.ema_decay must be in [0, 1]")
        for k, v in {"vae.lr_schedule": self.vae.lr_schedule, "dit.lr_schedule": self.dit.lr_schedule}.items():
            if v not in LR_SCHEDULES:
                raise ConfigError(f"{k} must be one of {LR_SCHEDULES}")
        d, h, _ = self.dit.dims()
        if d % h:
            raise ConfigError("dit d_model must be divisible by n_heads")
        if self.vae.d_model % self.vae.n_heads:
            raise ConfigError("vae d_model must be divisible by n_heads")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {}).validate()


def _parse_scalar(text: str):
    return yaml.safe_load(text)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides (values parsed as YAML scalars)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_scalar(value)
    return data


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        data = yaml.safe_load(text) or {}
    data = apply_overrides(data, list(overrides or []))
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
