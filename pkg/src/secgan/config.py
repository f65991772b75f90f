"""Flat experiment configuration with named defaults and validated overrides."""
from __future__ import annotations

import dataclasses
import difflib
import hashlib
import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, get_type_hints

import yaml

from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # model
    backbone: str = "stargan"
    variant: str = "secgan"          # secgan | baseline | concat
    resolution: int = 128
    attributes: list[str] = field(default_factory=lambda: [
        "Bald", "Bangs", "Black_Hair", "Blond_Hair", "Brown_Hair", "Bushy_Eyebrows", "Eyeglasses",
        "Male", "Mouth_Slightly_Open", "Mustache", "No_Beard", "Pale_Skin", "Young",
    ])
    g_conv_dim: int = 64
    g_n_res: int = 6
    g_max_dim: int = 1024
    d_conv_dim: int = 64
    d_n_layers: int = 0              # 0: min(6, log2(resolution)) for the PatchGAN critic
    d_fc_dim: int = 1024
    leaky_slope: float = 0.01
    # losses
    lambda_cls: float = 1.0
    lambda_rec: float = 10.0
    lambda_gp: float = 10.0
    lambda_sc: float = 0.01
    cls_loss_form: str = "bce"       # bce | literal
    # optimisation
    batch_size: int = 16
    iterations: int = 200_000
    n_critic: int = 5
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    lr_schedule: str = "linear"      # linear | exponential | constant
    lr_floor: float = 2e-6
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    target_mode: str = "shuffle"     # shuffle | random-expression
    # data
    data_root: str = ""
    split_train: float = 182000.0   # counts, or fractions when <= 1
    split_val: float = 637.0
    split_test: float = 19962.0
    crop_size: int = 0               # 0: shorter image side
    parser_path: str = ""            # empty: train a parser from the dataset masks
    parser_epochs: int = 30
    parser_width: int = 16           # channels of the first parser stage; doubles per level
    # run
    seed: int = 0
    run_dir: str = ""
    checkpoint_every: int = 10_000
    log_every: int = 1
    sample_every: int = 0
    device: str = "cpu"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.backbone not in ("stargan", "attgan"):
            raise ConfigError(f"backbone: unknown value {self.backbone!r}")
        if self.variant not in ("secgan", "baseline", "concat"):
            raise ConfigError(f"variant: unknown value {self.variant!r}")
        if self.n_critic < 1:
            raise ConfigError("n_critic must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_schedule not in ("linear", "exponential", "constant"):
            raise ConfigError(f"lr_schedule: unknown value {self.lr_schedule!r}")
        if self.cls_loss_form not in ("bce", "literal"):
            raise ConfigError(f"cls_loss_form: unknown value {self.cls_loss_form!r}")
        if self.parser_width < 1:
            raise ConfigError("parser_width must be >= 1")
        if not self.attributes:
            raise ConfigError("attributes must not be empty")
        LossWeights(self.lambda_cls, self.lambda_rec, self.lambda_gp, self.lambda_sc)

    @property
    def n_a(self) -> int:
        return len(self.attributes)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cls, self.lambda_rec, self.lambda_gp, self.lambda_sc)

    @property
    def split(self) -> tuple:
        return (self.split_train, self.split_val, self.split_test)

    def generator_kwargs(self) -> dict:
        if self.backbone == "stargan":
            return {"conv_dim": self.g_conv_dim, "n_res": self.g_n_res}
        return {"conv_dim": self.g_conv_dim, "max_dim": self.g_max_dim}

    def discriminator_kwargs(self) -> dict:
        if self.backbone == "stargan":
            return {"conv_dim": self.d_conv_dim, "n_layers": self.d_n_layers or None, "slope": self.leaky_slope}
        return {"conv_dim": self.d_conv_dim, "max_dim": self.g_max_dim, "fc_dim": self.d_fc_dim,
                "slope": self.leaky_slope}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def replace(self, **changes) -> "ExperimentConfig":
        return apply_overrides(self, changes)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}
_HINTS = get_type_hints(ExperimentConfig)


def _unknown_key(key: str) -> ConfigError:
    close = difflib.get_close_matches(key, FIELD_TYPES, n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return ConfigError(f"unknown config key {key!r}{hint}")


def _coerce(key: str, value: Any):
    kind = _HINTS[key]
    if kind == list[str]:
        if isinstance(value, str):
            return [v for v in value.replace(",", " ").split() if v]
        return [str(v) for v in value]
    try:
        if kind is int:
            as_float = float(value)
            if as_float != int(as_float):
                raise ValueError
            return int(as_float)
        if kind is float:
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind.__name__}") from None
    return str(value)


def apply_overrides(config: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    values = config.to_dict()
    for key, value in overrides.items():
        key = key.replace("-", "_")
        if key not in FIELD_TYPES:
            raise _unknown_key(key)
        values[key] = _coerce(key, value)
    return ExperimentConfig(**values)


def from_dict(values: Mapping[str, Any]) -> ExperimentConfig:
    return apply_overrides(ExperimentConfig(), values)


def load_config(path_or_name: str | Path) -> ExperimentConfig:
    """Load a YAML config file, or a bundled preset by name (``toy``, ``celeba_stargan``, ...)."""
    path = Path(path_or_name)
    if path.is_file():
        text = path.read_text()
    else:
        preset = resources.files("secgan") / "configs" / f"{path_or_name}.yaml"
        if not preset.is_file():
            raise ConfigError(f"config file not found: {path_or_name}")
        text = preset.read_text()
    values = yaml.safe_load(text) or {}
    if not isinstance(values, dict):
        raise ConfigError(f"{path_or_name}: config must be a flat mapping")
    return from_dict(values)


def presets() -> Iterable[str]:
    return sorted(p.name[:-5] for p in (resources.files("secgan") / "configs").iterdir() if p.name.endswith(".yaml"))
