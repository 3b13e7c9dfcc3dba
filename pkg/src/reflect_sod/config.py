"""Experiment configuration: a JSON file plus dotted ``key=value`` overrides.

Every key has a default in :data:`DEFAULTS`; unknown keys are rejected and
override values are parsed and type-checked against the default's type.
"""
import copy
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from .losses import LossWeights
from .network import SFCNConfig

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "model": {
        "levels": 3,
        "convs_per_level": [1, 1, 1],
        "channels_per_level": [8, 16, 32],
        "input_size": [64, 64],
        "bn_epsilon": 1e-5,
        "bn_momentum": 0.1,
        "share_bn_affine": False,
        "fusion": "hierarchical",
        "head_kernel": 3,
    },
    "loss": {
        "mu": 0.01,
        "gamma": 20.0,
        "epsilon": 0.5,
        "lambda": [1.0, 1.0, 1.0],
        "beta_convention": "complement",
        "weighted": True,
        "sc_squared": False,
        "featnet_seed": 0,
    },
    "train": {
        "batch_size": 4,
        "momentum": 0.9,
        "weight_decay": 0.0005,
        "base_lr": 0.01,
        "lr_decay_factor": 0.9,
        "plateau_patience": 50,
        "plateau_threshold": 0.01,
        "max_steps": 500,
        "seed": 0,
        "eval_every": 100,
        "ablation_preset": "full",
        "augment": True,
        "dtype": "float32",
    },
    "reflection": {
        "k": 1.0,
        "mean_source": "dataset",
        "mean": [0.485, 0.456, 0.406],
    },
    "data": {
        "split": "train",
        "eval_split": "",
    },
}

DESCRIPTIONS = {
    "model.levels": "number of encoder stages L (>= 2)",
    "model.convs_per_level": "3x3 conv layers in each stage",
    "model.channels_per_level": "output channels of each stage",
    "model.input_size": "network input [H, W]; divisible by 2^(L-1)",
    "model.bn_epsilon": "batch-norm epsilon",
    "model.bn_momentum": "batch-norm running-statistics momentum",
    "model.share_bn_affine": "share BN scale/shift between the sibling branches",
    "model.fusion": "hierarchical | concat (no hierarchical fusion)",
    "model.head_kernel": "kernel size of the 2-filter prediction conv",
    "loss.mu": "weight of the semantic content term",
    "loss.gamma": "weight of the smooth-L1 term",
    "loss.epsilon": "smooth-L1 threshold",
    "loss.lambda": "per-layer weights of the semantic content term",
    "loss.beta_convention": "complement (beta=|Y-|/|Y|) | paper_literal (beta=|Y+|/|Y|)",
    "loss.weighted": "class-balanced BCE (true) or plain BCE (false)",
    "loss.sc_squared": "use the squared L2 norm in the semantic content term",
    "loss.featnet_seed": "seed of the frozen feature network",
    "train.batch_size": "images per SGD step",
    "train.momentum": "SGD momentum",
    "train.weight_decay": "L2 weight decay on trainable parameters",
    "train.base_lr": "initial learning rate",
    "train.lr_decay_factor": "multiplier applied on a loss plateau",
    "train.plateau_patience": "window length (steps) of the plateau test and cooldown",
    "train.plateau_threshold": "relative improvement below which a window counts as flat",
    "train.max_steps": "number of SGD steps",
    "train.seed": "seed for init, sampling and augmentation",
    "train.eval_every": "checkpoint (and held-out evaluation) interval",
    "train.ablation_preset": "a | b | c | d | e | full",
    "train.augment": "random mirror + crop on training batches",
    "train.dtype": "float32 | float64",
    "reflection.k": "reflection scale k > 0",
    "reflection.mean_source": "dataset (computed from the training split) | constant",
    "reflection.mean": "per-channel mean used when mean_source=constant",
    "data.split": "training split name",
    "data.eval_split": "held-out split evaluated every eval_every steps (empty: none)",
}

PRESETS = ("a", "b", "c", "d", "e", "full")


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, prefix: str = ""):
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be a table")
            _merge(base[key], value, path + ".")
        else:
            base[key] = _coerce(path, base[key], value)


def _coerce(path: str, default, value):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{path!r} expects a boolean, got {value!r}")
    if isinstance(default, (int, float)):
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                raise ConfigError(f"{path!r} expects a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path!r} expects a number, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool):
            if float(value) != int(value):
                raise ConfigError(f"{path!r} expects an integer, got {value!r}")
            return int(value)
        return float(value)
    if isinstance(default, list):
        if isinstance(value, str):
            try:
                value = json.loads(value) if value.strip().startswith("[") else value.split(",")
            except json.JSONDecodeError:
                raise ConfigError(f"{path!r} expects a list, got {value!r}") from None
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path!r} expects a list, got {value!r}")
        return [_coerce(path, default[0], v) for v in value] if default else list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path!r} expects a string, got {value!r}")
        return value
    raise ConfigError(f"{path!r}: unsupported value {value!r}")


def parse_override(text: str) -> Dict[str, Any]:
    """``"train.base_lr=0.1"`` -> ``{"train": {"base_lr": "0.1"}}``."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, value = text.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key {key!r} must look like section.name")
    return {parts[0]: {parts[1]: value.strip()}}


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> Dict[str, Dict[str, Any]]:
    config = copy.deepcopy(DEFAULTS)
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge(config, data)
    for text in overrides:
        _merge(config, parse_override(text))
    validate(config)
    return config


def from_dict(data: dict) -> Dict[str, Dict[str, Any]]:
    config = copy.deepcopy(DEFAULTS)
    _merge(config, data)
    validate(config)
    return config


def validate(config: dict):
    try:
        model_config(config)
        loss_weights(config)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    train = config["train"]
    if train["ablation_preset"] not in PRESETS:
        raise ConfigError(f"train.ablation_preset must be one of {PRESETS}")
    if train["batch_size"] < 1 or train["max_steps"] < 0 or train["plateau_patience"] < 1:
        raise ConfigError("batch_size and plateau_patience must be >= 1, max_steps >= 0")
    if train["eval_every"] < 1:
        raise ConfigError("train.eval_every must be >= 1")
    if train["base_lr"] < 0 or train["weight_decay"] < 0 or not 0 <= train["momentum"] < 1:
        raise ConfigError("base_lr and weight_decay must be >= 0 and momentum in [0, 1)")
    if not 0 < train["lr_decay_factor"] <= 1:
        raise ConfigError("train.lr_decay_factor must lie in (0, 1]")
    if train["dtype"] not in ("float32", "float64"):
        raise ConfigError("train.dtype must be float32 or float64")
    refl = config["reflection"]
    if refl["k"] <= 0:
        raise ConfigError("reflection.k must be positive")
    if refl["mean_source"] not in ("dataset", "constant"):
        raise ConfigError("reflection.mean_source must be dataset or constant")
    if len(refl["mean"]) != 3 or not all(0 <= v <= 1 for v in refl["mean"]):
        raise ConfigError("reflection.mean needs three values in [0, 1]")


def apply_preset(config: dict) -> dict:
    """Force the fusion mode and loss terms selected by ``train.ablation_preset``.

    a: concat fusion + BCE; b: + hierarchical fusion; c: weighted BCE;
    d: + semantic content; e: weighted BCE + smooth L1; full: all terms.
    """
    config = copy.deepcopy(config)
    preset = config["train"]["ablation_preset"]
    model, loss = config["model"], config["loss"]
    model["fusion"] = "concat" if preset == "a" else "hierarchical"
    loss["weighted"] = preset not in ("a", "b")
    if preset in ("a", "b", "c", "e"):
        loss["mu"] = 0.0
    if preset in ("a", "b", "c", "d"):
        loss["gamma"] = 0.0
    return config


def model_config(config: dict) -> SFCNConfig:
    m = config["model"]
    return SFCNConfig(levels=m["levels"], convs_per_level=m["convs_per_level"],
                      channels_per_level=m["channels_per_level"], input_size=m["input_size"],
                      bn_epsilon=m["bn_epsilon"], bn_momentum=m["bn_momentum"],
                      share_bn_affine=m["share_bn_affine"], fusion=m["fusion"],
                      head_kernel=m["head_kernel"])


def loss_weights(config: dict) -> LossWeights:
    l = config["loss"]
    return LossWeights(mu=l["mu"], gamma=l["gamma"], epsilon=l["epsilon"], lambdas=l["lambda"],
                       beta_convention=l["beta_convention"], weighted=l["weighted"],
                       sc_squared=l["sc_squared"], featnet_seed=l["featnet_seed"])


def describe_keys(sections: Iterable[str]) -> str:
    lines = []
    for section in sections:
        for key, default in DEFAULTS[section].items():
            path = f"{section}.{key}"
            lines.append(f"  {path:<28} {DESCRIPTIONS[path]} (default: {json.dumps(default)})")
    return "\n".join(lines)
