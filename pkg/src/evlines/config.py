"""Layered run configuration: preset defaults <- config file <- ``key=value`` overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Optional

from .blur_synthesis import TrajectoryConfig
from .errors import ConfigError
from .event_repr import grid_channels
from .fusion_backbone import BackboneConfig
from .line_detector import DetectorConfig
from .training import ModelConfig, TrainConfig

PRESETS = ("default", "toy")


def _backbone_dict(cfg: BackboneConfig) -> dict:
    d = asdict(cfg)
    d.pop("event_channels")  # derived from the event grid settings
    return d


def default_config(preset: str = "default") -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    toy = preset == "toy"
    bb = BackboneConfig.toy() if toy else BackboneConfig()
    det = DetectorConfig.toy() if toy else DetectorConfig()
    return {
        "preset": preset,
        "seed": 0,
        "model": {"backbone": _backbone_dict(bb), "detector": asdict(det), "grid_kind": "est", "bins": 5},
        "train": {k: v for k, v in asdict(TrainConfig()).items() if k != "seed"},
        "synth": {"num_interp_frames": 39, "window": 0.03, "max_translation": 8.0, "max_rotation": 3.0,
                  "contrast": "sample", "scene_size": 64, "max_shapes": 2, "test_fraction": 0.0},
    }


def merge(base: dict, overlay: dict, prefix: str = "") -> dict:
    """Recursively overlay ``overlay`` on ``base``; keys absent from ``base`` are rejected."""
    out = copy.deepcopy(base)
    for k, v in overlay.items():
        path = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[k], dict) and k != "loss_weights":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path!r} expects a mapping")
            out[k] = merge(out[k], v, path + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"malformed override key {key!r}")
    node: dict = {}
    root = node
    for p in parts[:-1]:
        node[p] = {}
        node = node[p]
    node[parts[-1]] = parse_value(value)
    return root


def load_file(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def resolve(config_file: Optional[str] = None, overrides: Iterable[str] = (), preset: Optional[str] = None,
            seed: Optional[int] = None) -> dict:
    """Effective configuration. A ``preset`` key in the file or overrides selects the defaults layer."""
    layers = []
    if config_file:
        layers.append(load_file(config_file))
    layers += [parse_override(o) for o in overrides]
    chosen = preset
    for layer in layers:
        if "preset" in layer:
            chosen = layer["preset"]
    cfg = default_config(chosen or "default")
    for layer in layers:
        cfg = merge(cfg, layer)
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    channels = grid_channels(m["grid_kind"], m["bins"])
    try:
        bb = BackboneConfig(**m["backbone"], event_channels=channels)
        det = DetectorConfig(**m["detector"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return ModelConfig(bb, det, m["grid_kind"], m["bins"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"], seed=cfg["seed"])


def trajectory_config(cfg: dict, seed: int) -> TrajectoryConfig:
    s = cfg["synth"]
    return TrajectoryConfig(s["num_interp_frames"], s["window"], s["max_translation"], s["max_rotation"], seed)


def validate(cfg: dict) -> None:
    model_config(cfg)
    train_config(cfg)
    trajectory_config(cfg, 0)
    c = cfg["synth"]["contrast"]
    if not (c == "sample" or (isinstance(c, (int, float)) and c > 0)):
        raise ConfigError("synth.contrast must be 'sample' or a positive number")
    if not 0.0 <= cfg["synth"]["test_fraction"] < 1.0:
        raise ConfigError("synth.test_fraction must lie in [0, 1)")
