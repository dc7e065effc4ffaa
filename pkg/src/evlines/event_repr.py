"""Dense grid encodings of an event window.

All encoders return ``H x W x C`` float64 arrays at sensor resolution.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError, ValidationError
from .event_model import EventWindow

# floating slack when checking that normalized timestamps land in [0, B - 1]
_TSTAR_TOL = 1e-9


class GridKind(str, enum.Enum):
    EST = "est"
    VOXEL = "voxel"
    EC_SAE = "ec_sae"
    EC_SAE_NOPOL = "ec_sae_nopol"


def grid_channels(kind: GridKind | str, bins: int) -> int:
    kind = GridKind(kind)
    return {GridKind.EST: 2 * bins, GridKind.VOXEL: bins,
            GridKind.EC_SAE: 4, GridKind.EC_SAE_NOPOL: 2}[kind]


@dataclass
class EventGrid:
    data: np.ndarray
    kind: GridKind
    bins: Optional[int] = None

    def __post_init__(self):
        self.kind = GridKind(self.kind)

    @property
    def shape(self):
        return self.data.shape


def _check(window: EventWindow, bins: int) -> None:
    if bins < 1:
        raise ValueError(f"number of bins must be >= 1, got {bins}")
    if window.duration <= 0 and len(window):
        raise ValueError("window duration must be positive")


def encode_est(window: EventWindow, B: int) -> EventGrid:
    """Event spike tensor: triangular temporal kernel per polarity, ``2B`` channels.

    Channels ``0..B-1`` hold positive events and ``B..2B-1`` negative events.
    """
    _check(window, B)
    h, w = window.height, window.width
    if len(window) == 0:
        return EventGrid(np.zeros((h, w, 2 * B), np.float64), GridKind.EST, B)
    # t0 is shared across polarities: the earliest event of the whole window
    t0 = window.t.min()
    halves = []
    for polarity in (1, -1):
        sub = window.select(window.p == polarity)
        if len(sub) == 0:
            halves.append(np.zeros((B, h, w)))
            continue
        halves.append(_splat_from(sub, B, t0))
    data = np.concatenate(halves, axis=0).transpose(1, 2, 0)
    return EventGrid(data.astype(np.float64), GridKind.EST, B)


def _splat_from(window: EventWindow, bins: int, t0: float, signed: bool = False) -> np.ndarray:
    h, w = window.height, window.width
    tstar = (bins - 1) * (window.t - t0) / window.duration if window.duration > 0 else np.zeros(len(window))
    assert tstar.min() >= -_TSTAR_TOL and tstar.max() <= bins - 1 + _TSTAR_TOL, \
        "event timestamps fall outside the window"
    tstar = np.clip(tstar, 0.0, bins - 1)
    lower = np.floor(tstar).astype(np.int64)
    frac = tstar - lower
    weights = window.p.astype(np.float64) if signed else np.ones(len(window))
    out = np.zeros(bins * h * w, dtype=np.float64)
    pix = window.y.astype(np.int64) * w + window.x
    np.add.at(out, lower * h * w + pix, weights * (1.0 - frac))
    upper = lower + 1
    ok = upper < bins
    np.add.at(out, upper[ok] * h * w + pix[ok], (weights * frac)[ok])
    return out.reshape(bins, h, w)


def encode_voxel(window: EventWindow, B: int) -> EventGrid:
    """Voxel grid: polarity-signed triangular accumulation into ``B`` channels."""
    _check(window, B)
    h, w = window.height, window.width
    if len(window) == 0:
        return EventGrid(np.zeros((h, w, B), np.float64), GridKind.VOXEL, B)
    data = _splat_from(window, B, window.t.min(), signed=True).transpose(1, 2, 0)
    return EventGrid(data.astype(np.float64), GridKind.VOXEL, B)


def encode_ec_sae(window: EventWindow, with_polarity: bool = True) -> EventGrid:
    """Event count plus surface of active events.

    With polarity the channels are ``[EC+, EC-, SAE+, SAE-]``, otherwise
    ``[EC, SAE]``. SAE holds ``(t_last - t0) / T`` of the latest event at each
    pixel, 0 where no event fired.
    """
    h, w = window.height, window.width
    kind = GridKind.EC_SAE if with_polarity else GridKind.EC_SAE_NOPOL
    nch = 4 if with_polarity else 2
    if len(window) == 0:
        return EventGrid(np.zeros((h, w, nch), np.float64), kind)
    if window.duration <= 0:
        raise ValueError("window duration must be positive")
    t0 = window.t.min()
    tn = np.clip((window.t - t0) / window.duration, 0.0, 1.0)
    pix = window.y.astype(np.int64) * w + window.x
    groups = [window.p == 1, window.p == -1] if with_polarity else [np.ones(len(window), bool)]
    counts, surfaces = [], []
    for m in groups:
        ec = np.bincount(pix[m], minlength=h * w).astype(np.float64)
        sae = np.zeros(h * w)
        np.maximum.at(sae, pix[m], tn[m])
        counts.append(ec.reshape(h, w))
        surfaces.append(sae.reshape(h, w))
    data = np.stack(counts + surfaces, axis=-1)
    return EventGrid(data.astype(np.float64), kind)


def encode(window: EventWindow, kind: GridKind | str, B: int = 5) -> EventGrid:
    kind = GridKind(kind)
    if kind is GridKind.EST:
        return encode_est(window, B)
    if kind is GridKind.VOXEL:
        return encode_voxel(window, B)
    return encode_ec_sae(window, with_polarity=kind is GridKind.EC_SAE)


def resize_grid(grid: EventGrid, size: int | tuple[int, int]) -> EventGrid:
    """Resample a grid spatially: bilinear for EST/voxel, nearest for EC/SAE."""
    oh, ow = (size, size) if isinstance(size, int) else size
    if grid.data.shape[:2] == (oh, ow):
        return grid
    t = torch.from_numpy(np.ascontiguousarray(grid.data.transpose(2, 0, 1)))[None]
    if grid.kind in (GridKind.EST, GridKind.VOXEL):
        out = F.interpolate(t, size=(oh, ow), mode="bilinear", align_corners=False)
    else:
        out = F.interpolate(t, size=(oh, ow), mode="nearest")
    return EventGrid(out[0].numpy().transpose(1, 2, 0).copy(), grid.kind, grid.bins)


def write_grid(path, grid: EventGrid) -> None:
    """Cache a grid as raw float64 plus a JSON header next to it."""
    path = Path(path)
    data = np.ascontiguousarray(grid.data, dtype="<f8")
    path.write_bytes(data.tobytes())
    header = {"kind": grid.kind.value, "bins": grid.bins, "shape": list(data.shape), "dtype": "float64le"}
    path.with_suffix(".json").write_text(json.dumps(header))


def read_grid(path) -> EventGrid:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    shape = tuple(header["shape"])
    raw = path.read_bytes()
    if len(raw) != 8 * int(np.prod(shape)):
        raise ValidationError(f"{path}: grid payload does not match header shape {shape}")
    data = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    grid = EventGrid(data, header["kind"], header["bins"])
    if data.ndim != 3 or data.shape[2] != grid_channels(grid.kind, grid.bins or 1):
        raise ShapeError(f"{path}: channel count inconsistent with kind {grid.kind.value}")
    return grid
