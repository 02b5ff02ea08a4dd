"""Named presets and YAML run configuration.

A run configuration is a nested mapping with the sections below. Presets are
complete configurations; a YAML file and command-line flags override
individual keys on top of the chosen preset. Unknown sections or keys are
rejected.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .data.augment import AUGMENT_OPS
from .gvf import GvfParams
from .segnet import ModelConfig, StreamConfig
from .trainer import TrainConfig

_BASE = {
    "preset": "toy",
    "data": None,
    "out": None,
    "seed": 0,
    "model": {"in_channels": 1, "base_channels": 8, "depth": 3, "num_classes": 2, "two_stream": True},
    "train": {
        "learning_rate": 3e-3, "batch_size": 8, "max_epochs": 200, "alpha_mode": "fixed", "alpha": 0.5,
        "patience": 200, "loss_kind": "dice_bce", "class_weights": None, "patch": 64, "stride": 64,
        "augment": True, "dtype": "float32", "gvf_transform_cache": False,
        "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
    },
    "gvf": {"mu": 0.2, "iterations": 80, "sigma": 1.0, "normalize": "max_magnitude"},
    "eval": {"stride": None},
}


def _preset(model: dict, train: dict, eval_: dict) -> dict:
    cfg = copy.deepcopy(_BASE)
    cfg["model"].update(model)
    cfg["train"].update(train)
    cfg["eval"].update(eval_)
    return cfg


FULL_STREAM = {"base_channels": 64, "depth": 5}
FULL_TRAIN = {"learning_rate": 3e-4, "max_epochs": 90, "patience": 10}

PRESETS = {
    "em": _preset(
        FULL_STREAM,
        {**FULL_TRAIN, "batch_size": 64, "alpha": 0.3, "patch": 96, "stride": 48},
        {"stride": 96},
    ),
    "acdc-style": _preset(
        {**FULL_STREAM, "num_classes": 4},
        {**FULL_TRAIN, "batch_size": 12, "alpha": 0.5, "loss_kind": "dice_ce", "patch": 224, "stride": 224},
        {"stride": 224},
    ),
    "nuclei-style": _preset(
        {**FULL_STREAM, "in_channels": 3},
        {**FULL_TRAIN, "batch_size": 16, "alpha": 0.5, "patch": 96, "stride": 96},
        {"stride": 96},
    ),
    "toy": _preset({}, {}, {}),
}
for _name, _cfg in PRESETS.items():
    _cfg["preset"] = _name


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a section")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def resolve(preset: str | None = None, file: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Effective configuration: preset, then YAML file, then ``overrides``.

    ``overrides`` uses dotted keys (``train.alpha``) and ignores ``None``
    values. A ``preset`` key in the file is honoured unless ``preset`` is
    given explicitly.
    """
    loaded = {}
    if file is not None:
        try:
            loaded = yaml.safe_load(Path(file).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {file}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"{file}: top level must be a mapping")
    name = preset or loaded.get("preset") or "toy"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = _merge(PRESETS[name], {k: v for k, v in loaded.items() if k != "preset"})
    nested: dict = {}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = nested
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    cfg = _merge(cfg, nested)
    cfg["preset"] = name
    return cfg


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    n = int(m["num_classes"])
    if n < 2:
        raise ConfigError("model.num_classes must be >= 2")
    depth, base = int(m["depth"]), int(m["base_channels"])
    vector = StreamConfig(2, base, depth) if m["two_stream"] else None
    return ModelConfig(StreamConfig(int(m["in_channels"]), base, depth), vector, 1 if n == 2 else n)


def gvf_params(cfg: dict) -> GvfParams:
    g = cfg["gvf"]
    return GvfParams(mu=float(g["mu"]), iterations=int(g["iterations"]), smoothing_sigma=float(g["sigma"]))


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    weights = t["class_weights"]
    try:
        return TrainConfig(
            model=model_config(cfg),
            learning_rate=float(t["learning_rate"]),
            batch_size=int(t["batch_size"]),
            max_epochs=int(t["max_epochs"]),
            alpha_mode=t["alpha_mode"],
            alpha=float(t["alpha"]),
            patience=int(t["patience"]),
            seed=int(cfg["seed"]),
            loss_kind=t["loss_kind"],
            class_weights=tuple(float(w) for w in weights) if weights is not None else None,
            beta1=float(t["beta1"]),
            beta2=float(t["beta2"]),
            eps=float(t["eps"]),
            patch=int(t["patch"]),
            stride=int(t["stride"]),
            eval_stride=None if cfg["eval"]["stride"] is None else int(cfg["eval"]["stride"]),
            augment_ops=AUGMENT_OPS if t["augment"] else ("none",),
            gvf=gvf_params(cfg),
            gvf_normalize=cfg["gvf"]["normalize"],
            gvf_transform_cache=bool(t["gvf_transform_cache"]),
            dtype=t["dtype"],
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
