"""Dataset layout, manifests, augmentation and batch assembly.

A dataset directory holds ``manifest.json`` and one sub-directory per
sample::

    <id>/blurred.tiff     float32 RGB, exposure average
    <id>/clear.tiff       float32 RGB, clear end frame
    <id>/events.evt       raw event rows (+ events.json header)
    <id>/lines.json       [[x0, y0, x1, y1], ...] at clear-frame resolution
    <id>/meta.json        contrast, seed, trajectory, blur magnitude

Images are stored as float32 TIFF so a write/read round trip is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import cv2
import numpy as np
import torch

from .blur_synthesis import Sample
from .errors import ValidationError
from .event_model import EventWindow, LineSegment, lines_to_array, read_events, write_events
from .event_repr import encode, resize_grid

MANIFEST_VERSION = 1
AUGMENTATIONS = ("id", "hflip", "vflip", "rot180")
_FILES = {"blurred": "blurred.tiff", "clear": "clear.tiff", "events": "events.evt",
          "annotations": "lines.json", "meta": "meta.json"}


@dataclass
class Manifest:
    name: str
    splits: dict
    samples: dict = field(default_factory=dict)
    root: Optional[Path] = None
    version: int = MANIFEST_VERSION

    def validate(self, check_files: bool = True) -> None:
        seen: dict = {}
        for split, ids in self.splits.items():
            for sid in ids:
                if sid in seen:
                    raise ValidationError(f"sample {sid!r} appears in splits {seen[sid]!r} and {split!r}")
                seen[sid] = split
                if sid not in self.samples:
                    raise ValidationError(f"sample {sid!r} listed in split {split!r} has no file entry")
        if check_files and self.root is not None:
            missing = [str(self.path(sid, key)) for sid in seen for key in _FILES
                       if not self.path(sid, key).exists()]
            if missing:
                raise ValidationError(f"manifest {self.name!r} references missing files: {missing[:5]}")

    def path(self, sample_id: str, key: str) -> Path:
        return Path(self.root) / self.samples[sample_id][key]

    def ids(self, split: Optional[str] = None) -> list:
        if split is None:
            return [sid for ids in self.splits.values() for sid in ids]
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return list(self.splits[split])

    def to_json(self) -> str:
        return json.dumps({"schema_version": self.version, "name": self.name, "splits": self.splits,
                           "samples": self.samples}, indent=1, sort_keys=True)


def load_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    raw = json.loads(path.read_text())
    if raw.get("schema_version") != MANIFEST_VERSION:
        raise ValidationError(f"{path}: unsupported manifest version {raw.get('schema_version')}")
    m = Manifest(raw["name"], raw["splits"], raw["samples"], path.parent, raw["schema_version"])
    m.validate()
    return m


def write_manifest(root, name: str, splits: dict) -> Manifest:
    root = Path(root)
    ids = [sid for v in splits.values() for sid in v]
    m = Manifest(name, {k: list(v) for k, v in splits.items()},
                 {sid: {k: f"{sid}/{f}" for k, f in _FILES.items()} for sid in ids}, root)
    m.validate()
    (root / "manifest.json").write_text(m.to_json())
    return m


# --------------------------------------------------------------------------- images


def write_image(path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(np.asarray(image, np.float32)[..., ::-1])
    if not cv2.imwrite(str(path), img):
        raise OSError(f"could not write {path}")


def read_image(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"could not read image {path}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"{path}: expected a 3-channel image, got shape {img.shape}")
    return np.ascontiguousarray(img[..., ::-1].astype(np.float32))


# --------------------------------------------------------------------------- samples


def write_sample(directory, sample: Sample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_image(d / _FILES["blurred"], sample.blurred_image)
    write_image(d / _FILES["clear"], sample.clear_end_frame)
    write_events(d / _FILES["events"], sample.events)
    (d / _FILES["annotations"]).write_text(json.dumps(sample.lines().tolist()))
    (d / _FILES["meta"]).write_text(json.dumps(sample.meta, sort_keys=True))


def read_sample_dir(directory, sample_id: Optional[str] = None) -> Sample:
    d = Path(directory)
    sid = sample_id or d.name
    for f in _FILES.values():
        if not (d / f).exists():
            raise FileNotFoundError(f"sample {sid!r}: missing {d / f}")
    try:
        blurred = read_image(d / _FILES["blurred"])
        clear = read_image(d / _FILES["clear"])
        events = read_events(d / _FILES["events"])
        raw = json.loads((d / _FILES["annotations"]).read_text())
        meta = json.loads((d / _FILES["meta"]).read_text())
        arr = np.asarray(raw, np.float64).reshape(-1, 4)
        lines = [LineSegment.from_array(a) for a in arr]
        sample = Sample(blurred, events, clear, lines, meta)
        validate_sample(sample)
    except ValidationError as exc:
        raise ValidationError(f"sample {sid!r}: {exc}") from None
    return sample


def validate_sample(sample: Sample) -> None:
    h, w = sample.clear_end_frame.shape[:2]
    if sample.blurred_image.shape != sample.clear_end_frame.shape:
        raise ValidationError("blurred and clear images differ in shape")
    if (sample.events.width, sample.events.height) != (w, h):
        raise ValidationError("event sensor geometry differs from the image size")
    sample.events.validate()
    for ln in sample.annotations:
        ln.validate(w, h)


def load_sample(manifest: Manifest, sample_id: str) -> Sample:
    if sample_id not in manifest.samples:
        raise KeyError(f"sample {sample_id!r} not in manifest {manifest.name!r}")
    return read_sample_dir(manifest.path(sample_id, "clear").parent, sample_id)


def load_split(manifest: Manifest, split: Optional[str] = None) -> list:
    return [load_sample(manifest, sid) for sid in manifest.ids(split)]


# --------------------------------------------------------------------------- augmentation


def _flip_matrix(op: str, w: int, h: int) -> np.ndarray:
    sx, tx = (-1.0, float(w)) if op in ("hflip", "rot180") else (1.0, 0.0)
    sy, ty = (-1.0, float(h)) if op in ("vflip", "rot180") else (1.0, 0.0)
    return np.array([[sx, 0, tx], [0, sy, ty], [0, 0, 1.0]])


def augment(sample: Sample, op: str) -> Sample:
    """Apply one of ``id``, ``hflip``, ``vflip``, ``rot180`` to every field of ``sample``.

    Images and event pixel indices are mirrored (pixel ``x`` goes to
    ``W - 1 - x``); continuous annotation coordinates go to ``W - x``.
    Trajectory homographies are conjugated by the same mirror so that
    derived quantities such as the blur magnitude are unchanged.
    """
    if op not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {op!r}; expected one of {AUGMENTATIONS}")
    hx = op in ("hflip", "rot180")
    vy = op in ("vflip", "rot180")
    w, h = sample.size

    def img(a):
        if hx:
            a = a[:, ::-1]
        if vy:
            a = a[::-1]
        return np.ascontiguousarray(a)

    ev = sample.events
    events = EventWindow(w - 1 - ev.x if hx else ev.x.copy(), h - 1 - ev.y if vy else ev.y.copy(), ev.t.copy(),
                         ev.p.copy(), ev.t_start, ev.duration, ev.width, ev.height)
    arr = sample.lines().copy()
    if hx:
        arr[:, 0::2] = w - arr[:, 0::2]
    if vy:
        arr[:, 1::2] = h - arr[:, 1::2]
    scores = [ln.score for ln in sample.annotations]
    lines = [LineSegment(a[:2], a[2:], s) for a, s in zip(arr, scores)]
    meta = dict(sample.meta)
    if "homographies" in meta and op != "id":
        f = _flip_matrix(op, w, h)
        meta["homographies"] = [(f @ np.asarray(m) @ f).tolist() for m in meta["homographies"]]
    return Sample(img(sample.blurred_image), events, img(sample.clear_end_frame), lines, meta)


def samples_equal(a: Sample, b: Sample, atol: float = 1e-9) -> bool:
    """Field-wise equality.

    Rasters and event rows must match exactly. Continuous geometry
    (annotation endpoints, trajectory matrices) is compared within ``atol``
    because mirroring ``x -> W - x`` twice is exact only up to rounding.
    """
    ea, eb = a.events, b.events
    same_events = all(np.array_equal(getattr(ea, k), getattr(eb, k)) for k in ("x", "y", "t", "p"))
    homs_a, homs_b = a.meta.get("homographies"), b.meta.get("homographies")
    same_homs = (homs_a is None) == (homs_b is None) and (
        homs_a is None or np.allclose(homs_a, homs_b, rtol=0, atol=atol))
    la, lb = a.lines(), b.lines()
    same_lines = la.shape == lb.shape and np.allclose(la, lb, rtol=0, atol=atol)
    return (np.array_equal(a.blurred_image, b.blurred_image) and np.array_equal(a.clear_end_frame, b.clear_end_frame)
            and same_events and same_lines and same_homs)


# --------------------------------------------------------------------------- batches


def _scale_image(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if (h, w) == (size, size):
        return np.asarray(image, np.float32)
    interp = cv2.INTER_AREA if size < min(h, w) else cv2.INTER_LINEAR
    return cv2.resize(np.asarray(image, np.float32), (size, size), interpolation=interp)


def encode_inputs(sample: Sample, input_size: int, grid_kind: str = "est", bins: int = 5):
    """Network inputs for one sample.

    Returns:
        ``(image (3,S,S), events (C,S,S), lines (n,4))`` with the image
        mapped to ``[-1, 1]`` and lines rescaled to input pixels.
    """
    w, h = sample.size
    image = _scale_image(sample.blurred_image, input_size).transpose(2, 0, 1) * 2.0 - 1.0
    grid = resize_grid(encode(sample.events, grid_kind, bins), input_size).data.transpose(2, 0, 1)
    lines = sample.lines() * np.array([input_size / w, input_size / h] * 2)
    return image.astype(np.float32), grid.astype(np.float32), lines


def assemble_batch(samples: Sequence[Sample], input_size: int, grid_kind: str = "est", bins: int = 5,
                   ops: Optional[Iterable[str]] = None) -> dict:
    """Stack samples (optionally augmented per-sample by ``ops``) into a training batch."""
    if not samples:
        raise ValueError("empty batch")
    ops = list(ops) if ops is not None else ["id"] * len(samples)
    images, grids, lines = [], [], []
    for s, op in zip(samples, ops):
        im, gr, ln = encode_inputs(augment(s, op) if op != "id" else s, input_size, grid_kind, bins)
        images.append(im)
        grids.append(gr)
        lines.append(ln)
    return {"image": torch.from_numpy(np.stack(images)), "events": torch.from_numpy(np.stack(grids)),
            "lines": lines}


def encoded_cache(samples: Sequence[Sample], input_size: int, grid_kind: str = "est", bins: int = 5) -> dict:
    """Pre-encode every sample under every augmentation: ``{(index, op): (image, events, lines)}``."""
    return {(i, op): encode_inputs(augment(s, op), input_size, grid_kind, bins)
            for i, s in enumerate(samples) for op in AUGMENTATIONS}


def batch_from_cache(cache: dict, keys: Sequence) -> dict:
    items = [cache[k] for k in keys]
    return {"image": torch.from_numpy(np.stack([it[0] for it in items])),
            "events": torch.from_numpy(np.stack([it[1] for it in items])),
            "lines": [it[2] for it in items]}


def gt_lines(samples: Sequence[Sample]) -> list:
    return [lines_to_array(s.annotations) for s in samples]
