"""Model configuration, fitting loop, prediction and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data_io import AUGMENTATIONS, batch_from_cache, encode_inputs, encoded_cache
from .errors import ConfigError, SchemaError
from .event_repr import GridKind, grid_channels
from .fusion_backbone import BackboneConfig
from .line_detector import DetectorConfig, LineDetector, lr_at_epoch, make_optimizer, train_step
from .metrics import msap, structural_ap

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "evlines-checkpoint/1"


@dataclass
class TrainConfig:
    lr: float = 4e-4
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 30
    decay_epoch: int = 25
    decay_factor: float = 0.1
    max_steps: Optional[int] = None
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    grid_kind: str = "est"
    bins: int = 5

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.detector, dict):
            self.detector = DetectorConfig(**self.detector)
        self.grid_kind = GridKind(self.grid_kind).value
        channels = grid_channels(self.grid_kind, self.bins)
        if self.backbone.event_channels != channels:
            raise ConfigError(f"backbone expects {self.backbone.event_channels} event channels but "
                              f"{self.grid_kind} with {self.bins} bins has {channels}")

    @classmethod
    def toy(cls, grid_kind: str = "est", bins: int = 5, backbone: Optional[dict] = None,
            detector: Optional[dict] = None) -> "ModelConfig":
        return cls(BackboneConfig.toy(event_channels=grid_channels(grid_kind, bins), **(backbone or {})),
                   DetectorConfig.toy(**(detector or {})), grid_kind, bins)

    def to_dict(self) -> dict:
        return {"backbone": self.backbone.to_dict(), "detector": self.detector.to_dict(),
                "grid_kind": self.grid_kind, "bins": self.bins}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def build_model(cfg: ModelConfig) -> LineDetector:
    return LineDetector(cfg.backbone, cfg.detector)


# --------------------------------------------------------------------------- prediction


def predict(model: LineDetector, samples: Sequence, cfg: ModelConfig, batch_size: int = 8) -> list[dict]:
    """Detections per sample in original image coordinates."""
    model.eval()
    size = cfg.backbone.input_size
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        enc = [encode_inputs(s, size, cfg.grid_kind, cfg.bins) for s in chunk]
        image = torch.from_numpy(np.stack([e[0] for e in enc]))
        events = torch.from_numpy(np.stack([e[1] for e in enc]))
        for s, det in zip(chunk, model.detect(image, events)):
            w, h = s.size
            sx, sy = w / size, h / size
            lines = det["lines"].copy()
            lines[:, [0, 2]] *= sx
            lines[:, [1, 3]] *= sy
            junc = det["junctions"].copy()
            junc[:, 0] *= sx
            junc[:, 1] *= sy
            out.append({"lines": lines, "junctions": junc})
    return out


def evaluate_samples(model: LineDetector, samples: Sequence, cfg: ModelConfig) -> dict:
    preds = predict(model, samples, cfg)
    pl = [p["lines"] for p in preds]
    gl = [s.lines() for s in samples]
    sizes = [s.size for s in samples]
    return {"sAP10": structural_ap(pl, gl, 10.0, image_sizes=sizes), "msAP": msap(pl, gl, image_sizes=sizes)}


# --------------------------------------------------------------------------- fitting


@dataclass
class FitResult:
    history: list
    steps: int
    reached_step: Optional[int] = None
    seconds: float = 0.0


def fit(model: LineDetector, samples: Sequence, cfg: ModelConfig, tcfg: TrainConfig,
        eval_every: Optional[int] = None, target_sap10: Optional[float] = None,
        val_samples: Optional[Sequence] = None, on_epoch: Optional[Callable[[dict], None]] = None) -> FitResult:
    """Train ``model`` on ``samples``.

    Runs ``tcfg.epochs`` epochs (or stops at ``tcfg.max_steps``). With
    ``target_sap10`` set, training-set sAP10 is checked every ``eval_every``
    steps and the loop stops once the target is reached.
    """
    if not samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng(tcfg.seed)
    torch.manual_seed(tcfg.seed)
    cache = encoded_cache(samples, cfg.backbone.input_size, cfg.grid_kind, cfg.bins)
    opt = make_optimizer(model, tcfg.lr, tcfg.weight_decay)
    history = []
    step = 0
    reached = None
    t0 = time.time()
    for epoch in range(1, tcfg.epochs + 1):
        lr = lr_at_epoch(epoch, tcfg.lr, tcfg.decay_epoch, tcfg.decay_factor)
        for g in opt.param_groups:
            g["lr"] = lr
        order = rng.permutation(len(samples))
        sums: dict = {}
        nb = 0
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            ops = rng.choice(AUGMENTATIONS, size=len(idx)) if tcfg.augment else ["id"] * len(idx)
            batch = batch_from_cache(cache, [(int(i), str(o)) for i, o in zip(idx, ops)])
            losses = train_step(batch, model, opt, rng)
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v
            nb += 1
            step += 1
            if target_sap10 is not None and eval_every and step % eval_every == 0:
                score = evaluate_samples(model, samples, cfg)["sAP10"]
                log.info("step %d sAP10 %.2f", step, score)
                if score >= target_sap10:
                    reached = step
                    break
            if tcfg.max_steps is not None and step >= tcfg.max_steps:
                break
        record = {"epoch": epoch, "lr": lr, "step": step, **{k: v / max(nb, 1) for k, v in sums.items()}}
        if val_samples:
            record["val_msAP"] = evaluate_samples(model, val_samples, cfg)["msAP"]
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if reached is not None or (tcfg.max_steps is not None and step >= tcfg.max_steps):
            break
    return FitResult(history, step, reached, time.time() - t0)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: LineDetector, cfg: ModelConfig, extra: Optional[dict] = None) -> None:
    """Write parameters and buffers as named raw arrays plus a JSON config blob, atomically."""
    path = Path(path)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    blob = {"schema": CHECKPOINT_SCHEMA, "config": cfg.to_dict(), "extra": extra or {}}
    arrays["__config__"] = np.frombuffer(json.dumps(blob, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict]:
    with np.load(path, allow_pickle=False) as z:
        if "__config__" not in z.files:
            raise SchemaError(f"{path}: not a checkpoint archive (no config blob)")
        blob = json.loads(bytes(z["__config__"]).decode())
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    if blob.get("schema") != CHECKPOINT_SCHEMA:
        raise SchemaError(f"{path}: schema {blob.get('schema')!r}, expected {CHECKPOINT_SCHEMA!r}")
    return state, blob


def load_checkpoint(path, cfg: Optional[ModelConfig] = None) -> tuple[LineDetector, ModelConfig]:
    """Rebuild a model from a checkpoint.

    With ``cfg`` given the stored configuration must match it in every
    field that shapes the network; a mismatch raises :class:`SchemaError`.
    """
    state, blob = read_checkpoint(path)
    stored = ModelConfig.from_dict(blob["config"])
    if cfg is not None:
        diff = _config_diff(stored.to_dict(), cfg.to_dict())
        if diff:
            raise SchemaError(f"{path}: checkpoint config incompatible with requested config: {diff}")
    model = build_model(cfg or stored)
    load_state(model, state, path)
    return model, cfg or stored


def load_state(model: LineDetector, state: dict, source="checkpoint") -> None:
    current = model.state_dict()
    missing = sorted(set(current) - set(state))
    unexpected = sorted(set(state) - set(current))
    bad = [k for k in current if k in state and tuple(current[k].shape) != tuple(state[k].shape)]
    if missing or unexpected or bad:
        raise SchemaError(f"{source}: parameter mismatch (missing {missing[:3]}, unexpected {unexpected[:3]}, "
                          f"shape {bad[:3]})")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in state.items()})


# Detector thresholds only affect decoding, so they may differ between a
# pre-trained checkpoint and the fine-tuning run.
_DECODE_ONLY = {"score_threshold", "junction_threshold", "mask_threshold", "tau_match", "dedupe_distance",
                "num_junctions", "num_line_proposals", "num_pos", "num_neg", "num_gt_pos", "positive_distance",
                "field_band", "static_negatives", "loss_weights"}


def _config_diff(a: dict, b: dict) -> list:
    diff = []
    for section in ("backbone", "detector"):
        for k in sorted(set(a[section]) | set(b[section])):
            if section == "detector" and k in _DECODE_ONLY:
                continue
            if a[section].get(k) != b[section].get(k):
                diff.append(f"{section}.{k}: {a[section].get(k)!r} != {b[section].get(k)!r}")
    for k in ("grid_kind", "bins"):
        if a[k] != b[k]:
            diff.append(f"{k}: {a[k]!r} != {b[k]!r}")
    return diff


def asdict_config(tcfg: TrainConfig) -> dict:
    return asdict(tcfg)
