"""Synthetic motion-blurred frame + event samples from a clear annotated image.

A smooth random camera motion (in-plane rotation plus translation) is
applied as a sequence of homographies that ends at the identity, so the
last simulated frame is the annotated input image itself. The frames feed
the event simulator and their mean is the blurred exposure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import cv2
import numpy as np

from .errors import ConfigError
from .event_model import (EventWindow, LineSegment, average_blur, generate_events, lines_to_array,
                          to_log_luminance)

CONTRAST_RANGE = (0.05, 0.5)
_MAX_ATTEMPTS = 5


@dataclass
class TrajectoryConfig:
    num_interp_frames: int = 39
    window: float = 0.03
    max_translation: float = 8.0
    max_rotation: float = 3.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_interp_frames < 1:
            raise ConfigError("num_interp_frames must be >= 1")
        if self.window <= 0:
            raise ConfigError("window must be positive")
        if self.max_translation < 0 or self.max_rotation < 0:
            raise ConfigError("motion magnitudes must be non-negative")

    @property
    def is_static(self) -> bool:
        return self.max_translation == 0 and self.max_rotation == 0


@dataclass
class Sample:
    blurred_image: np.ndarray
    events: EventWindow
    clear_end_frame: np.ndarray
    annotations: list
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        h, w = self.clear_end_frame.shape[:2]
        return w, h

    def lines(self) -> np.ndarray:
        return lines_to_array(self.annotations)


def derive_seed(global_seed: int, image_id: Union[int, str]) -> int:
    """Stable per-image seed so samples can be generated in any order or in parallel."""
    key = image_id if isinstance(image_id, int) else int.from_bytes(str(image_id).encode()[:16].ljust(16, b"\0"), "little")
    return int(np.random.SeedSequence([global_seed, key]).generate_state(1)[0])


def rigid_homography(dx: float, dy: float, theta_deg: float, center) -> np.ndarray:
    """Rotation about ``center`` followed by a translation, as a 3x3 matrix."""
    cx, cy = center
    th = np.deg2rad(theta_deg)
    c, s = np.cos(th), np.sin(th)
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    back = np.array([[1, 0, cx + dx], [0, 1, cy + dy], [0, 0, 1.0]])
    return back @ rot @ to_origin


def _bezier(ctrl: np.ndarray, s: np.ndarray) -> np.ndarray:
    s = s[:, None]
    return ((1 - s) ** 3 * ctrl[0] + 3 * (1 - s) ** 2 * s * ctrl[1]
            + 3 * (1 - s) * s ** 2 * ctrl[2] + s ** 3 * ctrl[3])


def sample_trajectory(cfg: TrajectoryConfig, image_size, rng: np.random.Generator) -> list[np.ndarray]:
    """``N + 1`` homographies along a cubic pose curve pinned to the identity at the end."""
    w, h = image_size
    n = cfg.num_interp_frames
    direction = rng.uniform(0, 2 * np.pi)
    magnitude = cfg.max_translation * rng.uniform(0.5, 1.0)
    start = np.array([magnitude * np.cos(direction), magnitude * np.sin(direction),
                      cfg.max_rotation * rng.uniform(-1.0, 1.0)])
    scale = np.array([cfg.max_translation, cfg.max_translation, cfg.max_rotation])
    wobble = 0.25 * scale * rng.uniform(-1.0, 1.0, size=(2, 3))
    ctrl = np.stack([start, start * 2 / 3 + wobble[0], start / 3 + wobble[1], np.zeros(3)])
    poses = _bezier(ctrl, np.arange(n + 1) / n)
    poses[-1] = 0.0
    center = (w / 2.0, h / 2.0)
    return [rigid_homography(dx, dy, th, center) for dx, dy, th in poses]


def warp_image(image: np.ndarray, hom: np.ndarray) -> np.ndarray:
    """Render the scene moved by ``hom`` (continuous pixel-area coordinates)."""
    if np.array_equal(hom, np.eye(3)):
        return image.copy()
    h, w = image.shape[:2]
    shift = np.array([[1, 0, -0.5], [0, 1, -0.5], [0, 0, 1.0]])
    m = shift @ hom @ np.linalg.inv(shift)
    return cv2.warpPerspective(image, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def _degenerate(hom: np.ndarray) -> bool:
    return not np.all(np.isfinite(hom)) or abs(np.linalg.det(hom)) < 1e-6


def simulate_trajectory_frames(image: np.ndarray, cfg: TrajectoryConfig):
    """Frames of the image along a random trajectory.

    Returns:
        ``(frames, timestamps, homographies)`` with ``N + 1`` entries each.
        ``timestamps[k] = k * T / N`` and ``frames[N]`` equals ``image``.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {image.shape}")
    h, w = image.shape[:2]
    n = cfg.num_interp_frames
    for attempt in range(_MAX_ATTEMPTS):
        if cfg.is_static:
            homs = [np.eye(3) for _ in range(n + 1)]
        else:
            homs = sample_trajectory(cfg, (w, h), np.random.default_rng(cfg.rng_seed + attempt))
        homs[-1] = np.eye(3)
        if not any(_degenerate(m) for m in homs):
            break
    else:
        raise RuntimeError(f"could not draw an invertible trajectory in {_MAX_ATTEMPTS} attempts")
    frames = [warp_image(image, m) for m in homs]
    frames[-1] = image.copy()
    timestamps = np.arange(n + 1) * (cfg.window / n)
    return frames, timestamps, homs


def make_sample(image: np.ndarray, annotations: Sequence, cfg: TrajectoryConfig,
                C: Union[float, str] = "sample") -> Sample:
    """Blurred image, event window and clear end frame for one annotated image.

    ``C="sample"`` draws the contrast threshold from U(0.05, 0.5).
    """
    image = np.asarray(image, dtype=np.float32)
    lines = [a if isinstance(a, LineSegment) else LineSegment.from_array(a) for a in annotations]
    h, w = image.shape[:2]
    for ln in lines:
        ln.validate(w, h)
    if isinstance(C, str):
        if C != "sample":
            raise ValueError(f"C must be a float or 'sample', got {C!r}")
        C = float(np.random.default_rng([cfg.rng_seed, 1]).uniform(*CONTRAST_RANGE))
    frames, timestamps, homs = simulate_trajectory_frames(image, cfg)
    events = generate_events([to_log_luminance(f) for f in frames], timestamps, C)
    blurred = average_blur(frames)
    sample = Sample(blurred, events, frames[-1], lines,
                    {"contrast": C, "seed": cfg.rng_seed, "homographies": [m.tolist() for m in homs]})
    sample.meta["blur_magnitude"] = blur_magnitude(sample) if lines else 0.0
    return sample


def blur_magnitude(sample: Sample) -> float:
    """Mean displacement (pixels) of annotation endpoints between the first and last frame."""
    if not sample.annotations:
        raise ValueError("blur magnitude needs at least one annotated line")
    homs = sample.meta.get("homographies")
    if not homs:
        raise ValueError("sample carries no trajectory")
    h0 = np.asarray(homs[0], dtype=np.float64)
    hn = np.asarray(homs[-1], dtype=np.float64)
    pts = sample.lines().reshape(-1, 2)
    ph = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)

    def apply(m):
        q = ph @ m.T
        return q[:, :2] / q[:, 2:3]

    return float(np.mean(np.linalg.norm(apply(h0) - apply(hn), axis=1)))
