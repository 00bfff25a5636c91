"""Run configuration and its canonical text form."""

import dataclasses
import json
from dataclasses import dataclass, field

from .bank import BankConfig, SinkhornParams
from .data import SynthSpec
from .exceptions import ConfigError
from .losses import LossConfig
from .pipeline import ModelConfig


@dataclass
class ModelSettings:
    embed_dim: int = 16
    hidden_dim: int = 32
    key_dim: int = None
    value_dim: int = None
    stride: int = 1
    use_ssa: bool = False


@dataclass
class OptimConfig:
    learning_rate: float = 0.05
    poly_power: float = 0.9
    weight_decay: float = 0.0
    momentum: float = 0.0
    epochs: int = 30
    batch_size: int = 8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not self.poly_power > 0:
            raise ConfigError("poly_power must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainConfig:
    data: SynthSpec = field(default_factory=SynthSpec)
    model: ModelSettings = field(default_factory=ModelSettings)
    n_dist: int = 9
    sinkhorn: SinkhornParams = field(default_factory=SinkhornParams)
    bank: BankConfig = field(default_factory=BankConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    model_seed: int = 0
    shuffle_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_dist < 1:
            raise ConfigError("n_dist must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def model_config(self, in_dim=None, num_classes=None):
        return ModelConfig(
            in_dim=in_dim or self.data.input_dim,
            num_classes=num_classes or self.data.num_classes,
            **dataclasses.asdict(self.model),
        )

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_text(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        nested = {
            "data": SynthSpec,
            "model": ModelSettings,
            "sinkhorn": SinkhornParams,
            "bank": BankConfig,
            "loss": LossConfig,
            "optim": OptimConfig,
        }
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                allowed = {f.name for f in dataclasses.fields(typ)}
                bad = set(d[key]) - allowed
                if bad:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
                try:
                    d[key] = typ(**d[key])
                except TypeError as exc:
                    raise ConfigError(str(exc)) from exc
        return cls(**d)

    @classmethod
    def from_text(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc


# Hyperparameter flag names -> dotted config paths.
PARAM_PATHS = {
    "n-dist": "n_dist",
    "lambda": "sinkhorn.lam",
    "sinkhorn-iters": "sinkhorn.iterations",
    "mu": "bank.momentum",
    "warmup": "bank.warmup_steps",
    "tau": "loss.tau",
    "eta": "loss.eta",
    "alpha": "loss.alpha",
    "beta": "loss.beta",
}

_INT_PATHS = {"n_dist", "sinkhorn.iterations", "bank.warmup_steps"}


def resolve_param(name):
    name = name.replace("_", "-")
    aliases = {"n": "n-dist", "iterations": "sinkhorn-iters", "lam": "lambda"}
    name = aliases.get(name, name)
    if name not in PARAM_PATHS:
        raise ConfigError(f"unknown hyperparameter {name!r}; choose from {sorted(PARAM_PATHS)}")
    return PARAM_PATHS[name]


def coerce(path, value):
    return int(value) if path in _INT_PATHS else float(value)


def override(config, path, value):
    """Copy of ``config`` with the dotted field ``path`` replaced by ``value``."""
    head, _, rest = path.partition(".")
    if not rest:
        return dataclasses.replace(config, **{head: value})
    return dataclasses.replace(config, **{head: override(getattr(config, head), rest, value)})


def lookup(config, path):
    for part in path.split("."):
        config = getattr(config, part)
    return config


def with_seed(config, seed):
    """Same config with model, bank and shuffle seeds all set to ``seed``."""
    config = dataclasses.replace(config, model_seed=seed, shuffle_seed=seed)
    return override(config, "bank.init_seed", seed)
