"""Event and line primitives, contrast-threshold event generation, blur formation.

Coordinate convention used throughout the package: an image of width ``W``
spans the continuous interval ``[0, W]``; pixel column ``i`` covers
``[i, i + 1)`` and has its center at ``i + 0.5``. Events carry the integer
pixel index, line segments carry continuous coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ShapeError, ValidationError

LOG_EPS = 1e-3
EVENT_FILE_VERSION = 1
_ROW = np.dtype("<f8")


class Event(NamedTuple):
    x: int
    y: int
    t: float
    p: int


@dataclass
class EventWindow:
    """Time-sorted events observed over ``[t_start, t_start + duration]``.

    Events are stored column-wise; ``t`` holds absolute seconds (float64).
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    t_start: float
    duration: float
    width: int
    height: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int32).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.int32).reshape(-1)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.p = np.asarray(self.p, dtype=np.int8).reshape(-1)
        self.t_start = float(self.t_start)
        self.duration = float(self.duration)
        self.width = int(self.width)
        self.height = int(self.height)

    @classmethod
    def empty(cls, width: int, height: int, t_start: float = 0.0, duration: float = 0.0) -> "EventWindow":
        z = np.zeros(0)
        return cls(z, z, z, z, t_start, duration, width, height)

    @classmethod
    def from_events(cls, events: Sequence[Event], width, height, t_start, duration) -> "EventWindow":
        if len(events) == 0:
            return cls.empty(width, height, t_start, duration)
        arr = np.array([(e.x, e.y, e.t, e.p) for e in events], dtype=np.float64)
        order = np.argsort(arr[:, 2], kind="stable")
        arr = arr[order]
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], t_start, duration, width, height)

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield Event(int(self.x[i]), int(self.y[i]), float(self.t[i]), int(self.p[i]))

    @property
    def t_end(self) -> float:
        return self.t_start + self.duration

    def validate(self, tol: float = 1e-9) -> None:
        """Raise ValidationError if any invariant of the window is violated."""
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"non-positive sensor geometry {self.width}x{self.height}")
        n = len(self)
        if not (self.x.shape[0] == self.y.shape[0] == self.p.shape[0] == n):
            raise ValidationError("event columns have different lengths")
        if n == 0:
            return
        if self.x.min() < 0 or self.x.max() >= self.width or self.y.min() < 0 or self.y.max() >= self.height:
            raise ValidationError("event coordinates outside the sensor")
        if not np.all(np.abs(self.p) == 1):
            raise ValidationError("polarity must be exactly +1 or -1")
        if np.any(np.diff(self.t) < 0):
            raise ValidationError("events are not sorted by timestamp")
        if self.t[0] < self.t_start - tol or self.t[-1] > self.t_end + tol:
            raise ValidationError("event timestamps outside the window")

    def select(self, mask: np.ndarray) -> "EventWindow":
        return EventWindow(self.x[mask], self.y[mask], self.t[mask], self.p[mask],
                           self.t_start, self.duration, self.width, self.height)


@dataclass
class LineSegment:
    """Ordered endpoint pair in continuous image coordinates."""

    p0: np.ndarray
    p1: np.ndarray
    score: Optional[float] = None

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=np.float64).reshape(2)
        self.p1 = np.asarray(self.p1, dtype=np.float64).reshape(2)
        if self.score is not None:
            self.score = float(self.score)

    @classmethod
    def from_array(cls, row: Sequence[float]) -> "LineSegment":
        score = row[4] if len(row) > 4 else None
        return cls(row[0:2], row[2:4], score)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.p0, self.p1])

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.p1 - self.p0))

    def validate(self, width: int, height: int, tol: float = 0.5) -> None:
        pts = np.stack([self.p0, self.p1])
        if np.any(pts < -tol) or np.any(pts[:, 0] > width + tol) or np.any(pts[:, 1] > height + tol):
            raise ValidationError(f"line endpoints {pts.tolist()} outside {width}x{height}")
        if self.length <= 0:
            raise ValidationError("zero-length line segment")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"line score {self.score} outside [0, 1]")


def lines_to_array(lines: Sequence[LineSegment]) -> np.ndarray:
    """Stack segments into an ``(n, 4)`` array of ``x0, y0, x1, y1``."""
    if len(lines) == 0:
        return np.zeros((0, 4))
    return np.stack([ln.as_array() for ln in lines])


def array_to_lines(arr: np.ndarray, scores: Optional[np.ndarray] = None) -> list[LineSegment]:
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 4)
    if scores is None:
        return [LineSegment(r[:2], r[2:]) for r in arr]
    return [LineSegment(r[:2], r[2:], s) for r, s in zip(arr, scores)]


@dataclass(frozen=True)
class BlurredLineParams:
    """Integer parameters of a discrete thick line ``c <= a*x - b*y < c + v``."""

    a: int
    b: int
    c: int
    v: int

    def __post_init__(self):
        if self.a == 0 and self.b == 0:
            raise ValueError("(a, b) must not both be zero")
        if self.v <= 0:
            raise ValueError("line width v must be positive")

    @property
    def thickness(self) -> float:
        return self.v / max(abs(self.a), abs(self.b))


def blurred_line_membership(params: BlurredLineParams, pixel) -> bool:
    x, y = pixel
    value = params.a * x - params.b * y
    return bool(params.c <= value < params.c + params.v)


def to_log_luminance(image: np.ndarray, eps: float = LOG_EPS) -> np.ndarray:
    """Log intensity of an RGB (or gray) image with values in ``[0, 1]``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        gray = image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114
    else:
        gray = image
    return np.log(gray + eps)


def generate_events(
    log_luminance_frames: Sequence[np.ndarray],
    timestamps: Sequence[float],
    C: float,
    per_pixel_refs: Optional[np.ndarray] = None,
) -> EventWindow:
    """Simulate an ideal event sensor observing a sequence of log-luminance frames.

    Each pixel keeps a reference level. Between consecutive frames the
    luminance is assumed to vary linearly; every time it moves a further
    ``C`` away from the reference an event fires at the interpolated crossing
    time and the reference follows, so a transition with difference ``dL``
    to the reference emits ``floor(|dL| / C)`` events of sign ``sign(dL)``.

    Args:
        log_luminance_frames: at least two ``H x W`` arrays.
        timestamps: strictly increasing frame times in seconds.
        C: contrast threshold in log units.
        per_pixel_refs: optional initial reference levels; defaults to the
            first frame, which means no events at the window start.

    Returns:
        EventWindow spanning ``[timestamps[0], timestamps[-1]]``.
    """
    if C <= 0:
        raise ValueError(f"contrast threshold must be positive, got {C}")
    if len(log_luminance_frames) < 2:
        raise ValueError("need at least two frames")
    first = np.asarray(log_luminance_frames[0])
    if first.ndim != 2:
        raise ShapeError(f"frames must be 2-D, got shape {first.shape}")
    for fr in log_luminance_frames:
        if np.shape(fr) != first.shape:
            raise ShapeError(f"frame shape {np.shape(fr)} differs from {first.shape}")
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.shape[0] != len(log_luminance_frames):
        raise ShapeError("one timestamp per frame is required")
    if np.any(np.diff(ts) <= 0):
        raise ValueError("timestamps must be strictly increasing")

    height, width = first.shape
    origin = ts[0]
    rel = ts - origin
    ref = np.array(first if per_pixel_refs is None else per_pixel_refs, dtype=np.float64).reshape(-1)
    if ref.shape[0] != height * width:
        raise ShapeError("per_pixel_refs must match the frame geometry")

    chunks_idx, chunks_t, chunks_p = [], [], []
    prev = np.asarray(first, dtype=np.float64).reshape(-1)
    for k in range(1, len(log_luminance_frames)):
        cur = np.asarray(log_luminance_frames[k], dtype=np.float64).reshape(-1)
        delta = cur - ref
        count = np.floor(np.abs(delta) / C).astype(np.int64)
        sign = np.sign(delta)
        hit = np.flatnonzero(count)
        if hit.size:
            n = count[hit]
            pix = np.repeat(hit, n)
            # crossing index j = 1..n within each pixel
            j = np.arange(pix.size) - np.repeat(np.cumsum(n) - n, n) + 1
            s = sign[pix]
            level = ref[pix] + s * j * C
            span = cur[pix] - prev[pix]
            frac = np.clip((level - prev[pix]) / span, 0.0, 1.0)
            chunks_idx.append(pix)
            chunks_t.append(rel[k - 1] + frac * (rel[k] - rel[k - 1]))
            chunks_p.append(s.astype(np.int8))
            ref[hit] += count[hit] * C * sign[hit]
        prev = cur

    if not chunks_idx:
        return EventWindow.empty(width, height, origin, rel[-1])
    pix = np.concatenate(chunks_idx)
    t = np.concatenate(chunks_t)
    p = np.concatenate(chunks_p)
    order = np.argsort(t, kind="stable")
    pix, t, p = pix[order], t[order], p[order]
    return EventWindow(pix % width, pix // width, origin + t, p, origin, rel[-1], width, height)


def average_blur(frames: Sequence[np.ndarray]) -> np.ndarray:
    """Pixel-wise mean of the frames observed during one exposure.

    The mean is accumulated as offsets from the first frame, which makes a
    static sequence reproduce its frame bit for bit.
    """
    if len(frames) == 0:
        raise ValueError("average_blur needs at least one frame")
    base = np.asarray(frames[0])
    acc = np.zeros(base.shape, dtype=np.float64)
    for fr in frames:
        fr = np.asarray(fr)
        if fr.shape != base.shape:
            raise ShapeError(f"frame shape {fr.shape} differs from {base.shape}")
        acc += fr.astype(np.float64) - base
    out = base.astype(np.float64) + acc / len(frames)
    return np.clip(out, 0.0, 1.0).astype(base.dtype if base.dtype.kind == "f" else np.float64)


# -- event stream files ------------------------------------------------------

def _header_path(path: Path) -> Path:
    return path.with_suffix(".json")


def write_events(path, window: EventWindow) -> None:
    """Write ``window`` as little-endian float64 rows ``(t, x, y, p)`` plus a JSON header."""
    path = Path(path)
    rows = np.empty((len(window), 4), dtype=_ROW)
    rows[:, 0] = window.t
    rows[:, 1] = window.x
    rows[:, 2] = window.y
    rows[:, 3] = window.p
    path.write_bytes(rows.tobytes())
    header = {
        "version": EVENT_FILE_VERSION,
        "columns": ["t", "x", "y", "p"],
        "dtype": "float64le",
        "width": window.width,
        "height": window.height,
        "t_start": window.t_start,
        "duration": window.duration,
        "num_events": len(window),
    }
    _header_path(path).write_text(json.dumps(header, indent=1))


def read_events(path) -> EventWindow:
    path = Path(path)
    hpath = _header_path(path)
    if not path.exists() or not hpath.exists():
        raise FileNotFoundError(f"missing event file or header for {path}")
    header = json.loads(hpath.read_text())
    if header.get("version") != EVENT_FILE_VERSION:
        raise ValidationError(f"{hpath}: unsupported event file version {header.get('version')}")
    raw = path.read_bytes()
    expected = int(header["num_events"]) * 4 * _ROW.itemsize
    if len(raw) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes, found {len(raw)} (truncated or corrupt)")
    rows = np.frombuffer(raw, dtype=_ROW).reshape(-1, 4)
    window = EventWindow(rows[:, 1], rows[:, 2], rows[:, 0], rows[:, 3], header["t_start"],
                         header["duration"], header["width"], header["height"])
    try:
        window.validate()
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return window
