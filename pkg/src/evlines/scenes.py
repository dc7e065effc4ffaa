"""Procedural wireframe scenes: non-overlapping filled polygons on a textured background.

Every polygon edge is fully visible, so the edges are exact line annotations
and the corners exact junctions.
"""

from __future__ import annotations

import cv2
import numpy as np
from shapely.geometry import Polygon

_SUPERSAMPLE = 4
_SHIFT_BITS = 4


def render_polygons(polygons, colors, background: np.ndarray) -> np.ndarray:
    """Anti-aliased fill of ``polygons`` over ``background`` (H x W x 3 in [0, 1])."""
    h, w = background.shape[:2]
    s = _SUPERSAMPLE
    out = background.astype(np.float32).copy()
    for poly, color in zip(polygons, colors):
        mask = np.zeros((h * s, w * s), np.uint8)
        # continuous x maps to supersampled pixel-center coordinate x * s - 0.5
        pts = np.round((np.asarray(poly) * s - 0.5) * (1 << _SHIFT_BITS)).astype(np.int32)
        cv2.fillPoly(mask, [pts], 255, lineType=cv2.LINE_8, shift=_SHIFT_BITS)
        cover = mask.reshape(h, s, w, s).mean(axis=(1, 3)).astype(np.float32) / 255.0
        out = out * (1 - cover[..., None]) + np.asarray(color, np.float32) * cover[..., None]
    return np.clip(out, 0.0, 1.0)


def textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.15, 0.35, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    grad = 0.1 * (rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy)
    noise = cv2.GaussianBlur(rng.normal(0, 1, (size, size)).astype(np.float32), (0, 0), size / 16)
    noise = 0.04 * noise / (np.abs(noise).max() + 1e-6)
    tex = grad + noise
    return np.clip(base[None, None, :] + tex[..., None], 0, 1).astype(np.float32)


def _random_quad(rng, size, margin, min_edge):
    cx, cy = rng.uniform(margin + min_edge / 2, size - margin - min_edge / 2, size=2)
    half_w = rng.uniform(min_edge / 2, size / 3)
    half_h = rng.uniform(min_edge / 2, size / 3)
    th = rng.uniform(0, np.pi)
    corners = np.array([[-half_w, -half_h], [half_w, -half_h], [half_w, half_h], [-half_w, half_h]])
    corners += rng.uniform(-0.2, 0.2, size=corners.shape) * min_edge
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return corners @ rot.T + [cx, cy]


def _random_triangle(rng, size, margin, min_edge):
    c = rng.uniform(margin + min_edge, size - margin - min_edge, size=2)
    r = rng.uniform(min_edge * 0.7, size / 3)
    angles = np.sort(rng.uniform(0, 2 * np.pi, 3))
    return c + r * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _valid_shape(poly, placed, size, margin, min_edge, min_gap):
    if np.any(poly < margin) or np.any(poly > size - margin):
        return False
    edges = np.linalg.norm(np.roll(poly, -1, axis=0) - poly, axis=1)
    if np.any(edges < min_edge):
        return False
    shape = Polygon(poly)
    if not shape.is_valid or shape.area < min_edge ** 2 / 2:
        return False
    # interior angles below ~25 degrees give cramped corners
    for i in range(len(poly)):
        a, b, c = poly[i - 1], poly[i], poly[(i + 1) % len(poly)]
        u, v = a - b, c - b
        cosang = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
        if cosang > np.cos(np.deg2rad(25)):
            return False
    for other in placed:
        if shape.distance(Polygon(other)) < min_gap:
            return False
    return True


def random_scene(rng: np.random.Generator, size: int = 64, max_shapes: int = 2, min_edge: float | None = None,
                 min_gap: float | None = None, margin: float = 3.0, max_tries: int = 200):
    """Draw a scene.

    Returns:
        ``(image, lines)``; image is ``size x size x 3`` float32, lines an
        ``(n, 4)`` array of polygon edges in continuous pixel coordinates.
    """
    min_edge = size / 4 if min_edge is None else min_edge
    min_gap = size * 3 / 16 if min_gap is None else min_gap
    n_shapes = int(rng.integers(1, max_shapes + 1))
    placed = []
    tries = 0
    while len(placed) < n_shapes and tries < max_tries:
        tries += 1
        make = _random_quad if rng.uniform() < 0.7 else _random_triangle
        poly = make(rng, size, margin, min_edge)
        if _valid_shape(poly, placed, size, margin, min_edge, min_gap):
            placed.append(poly)
    if not placed:
        raise RuntimeError("failed to place any polygon; relax the scene constraints")
    background = textured_background(rng, size)
    bg_lum = float(background.mean())
    colors = []
    for _ in placed:
        lum = bg_lum + rng.choice([-1, 1]) * rng.uniform(0.3, 0.5)
        if not 0.05 < lum < 0.95:
            lum = bg_lum + 0.4 if bg_lum < 0.5 else bg_lum - 0.4
        colors.append(np.clip(lum + rng.uniform(-0.05, 0.05, size=3), 0, 1))
    image = render_polygons(placed, colors, background)
    lines = np.concatenate([np.concatenate([p, np.roll(p, -1, axis=0)], axis=1) for p in placed])
    return image, lines


def toy_samples(n: int, seed: int = 0, size: int = 64, traj: dict | None = None, **scene_kw) -> list:
    """``n`` synthetic blurred samples of random polygon scenes, reproducible from ``seed``."""
    from .blur_synthesis import TrajectoryConfig, derive_seed, make_sample
    from .event_model import LineSegment

    traj = dict(traj or {})
    out = []
    for i in range(n):
        s = derive_seed(seed, i)
        image, lines = random_scene(np.random.default_rng(s), size, **scene_kw)
        cfg = TrajectoryConfig(rng_seed=s, **traj)
        out.append(make_sample(image, [LineSegment.from_array(a) for a in lines], cfg))
    return out
