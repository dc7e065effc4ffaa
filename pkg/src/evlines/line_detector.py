"""Two-stage wireframe head on the fused feature map.

Stage one predicts a junction heatmap with sub-cell offsets together with a
dense line field; every confident field cell decodes to one line proposal.
Proposal endpoints are snapped to nearby junctions, and the surviving
junction-pair candidates are scored by a line-of-interest classifier that
reads features at points sampled along each candidate.

Coordinates: the network works on a ``S x S`` feature grid at stride 4 of
the ``input_size`` image; line geometry handed in and out of this module is
in input pixels (continuous, pixel ``i`` covers ``[i, i+1)``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .fusion_backbone import BackboneConfig, build_backbone, init_weights
from .metrics import pairwise_line_distance

STRIDE = 4
_DEDUPE_CHUNK = 512


@dataclass
class DetectorConfig:
    num_junctions: int = 300
    num_line_proposals: int = 5000
    num_pos: int = 300
    num_neg: int = 300
    num_gt_pos: int = 300
    loi_points: int = 32
    loi_pool: int = 4
    loi_dim: int = 1024
    score_threshold: float = 0.05
    junction_threshold: float = 0.008
    mask_threshold: float = 0.5
    tau_match: float = 10.0
    dedupe_distance: float = 1.0
    positive_distance: float = 4.0
    field_band: float = 2.0
    static_negatives: bool = True
    loss_weights: dict = field(default_factory=lambda: {"jloc": 1.0, "joff": 1.0, "mask": 1.0,
                                                        "field": 4.0, "cls": 1.0})

    def __post_init__(self):
        for name in ("num_junctions", "num_line_proposals", "num_pos", "num_neg", "num_gt_pos",
                     "loi_points", "loi_pool", "loi_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.loi_points % self.loi_pool:
            raise ConfigError("loi_points must be divisible by loi_pool")
        if self.loi_dim % (self.loi_points // self.loi_pool):
            raise ConfigError("loi_dim must be divisible by loi_points / loi_pool")
        if not 0.0 <= self.score_threshold < 1.0:
            raise ConfigError("score_threshold must lie in [0, 1)")
        if self.tau_match <= 0 or self.field_band <= 0:
            raise ConfigError("tau_match and field_band must be positive")
        unknown = set(self.loss_weights) - {"jloc", "joff", "mask", "field", "cls"}
        if unknown:
            raise ConfigError(f"unknown loss weights {sorted(unknown)}")

    @property
    def loi_channels(self) -> int:
        return self.loi_dim // (self.loi_points // self.loi_pool)

    @classmethod
    def toy(cls, **overrides) -> "DetectorConfig":
        base = dict(num_junctions=50, num_line_proposals=256, num_pos=64, num_neg=64, num_gt_pos=64, loi_dim=256)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- targets


def _point_segment_distance(points: np.ndarray, lines: np.ndarray) -> np.ndarray:
    """``(P, L)`` Euclidean distances from points to segments."""
    a, b = lines[None, :, :2], lines[None, :, 2:]
    p = points[:, None, :]
    ab = b - a
    denom = np.maximum((ab ** 2).sum(-1), 1e-12)
    t = np.clip(((p - a) * ab).sum(-1) / denom, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def cell_centers(size: int) -> np.ndarray:
    """``(size*size, 2)`` cell centers, row-major, as ``(x, y)``."""
    ys, xs = np.mgrid[0:size, 0:size]
    return np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1).astype(np.float64)


def unique_junctions(lines: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    pts = np.asarray(lines, np.float64).reshape(-1, 2)
    out: list = []
    for p in pts:
        if not any(np.abs(p - q).max() <= tol for q in out):
            out.append(p)
    return np.array(out).reshape(-1, 2)


def encode_targets(lines: np.ndarray, size: int, band: float = 2.0) -> dict:
    """Dense training targets for lines given in feature-cell coordinates.

    Returns a dict of float64 arrays: ``jmap (S,S)``, ``joff (2,S,S)``,
    ``mask (S,S)`` and ``field (4,S,S)``. The field stores, for each cell
    within ``band`` cells of a segment, the offset from the cell center to
    the nearest segment's midpoint and ``L * (cos 2phi, sin 2phi)`` with
    ``L`` the half-length and ``phi`` the segment direction.
    """
    lines = np.asarray(lines, np.float64).reshape(-1, 4)
    s = size
    jmap = np.zeros((s, s))
    joff = np.zeros((2, s, s))
    mask = np.zeros((s, s))
    fld = np.zeros((4, s, s))
    if len(lines) == 0:
        return {"jmap": jmap, "joff": joff, "mask": mask, "field": fld}
    for j in unique_junctions(lines):
        cx, cy = np.clip(np.floor(j).astype(int), 0, s - 1)
        jmap[cy, cx] = 1.0
        joff[:, cy, cx] = np.clip(j - (np.array([cx, cy]) + 0.5), -0.5, 0.5)
    centers = cell_centers(s)
    dist = _point_segment_distance(centers, lines)
    nearest = dist.argmin(axis=1)
    inside = dist[np.arange(len(centers)), nearest] <= band
    ln = lines[nearest]
    mid = 0.5 * (ln[:, :2] + ln[:, 2:])
    half = 0.5 * (ln[:, 2:] - ln[:, :2])
    half_len = np.linalg.norm(half, axis=1)
    phi2 = 2.0 * np.arctan2(half[:, 1], half[:, 0])
    vals = np.stack([mid[:, 0] - centers[:, 0], mid[:, 1] - centers[:, 1],
                     half_len * np.cos(phi2), half_len * np.sin(phi2)], axis=0)
    vals[:, ~inside] = 0.0
    fld[:] = vals.reshape(4, s, s)
    mask[:] = inside.reshape(s, s)
    return {"jmap": jmap, "joff": joff, "mask": mask, "field": fld}


def decode_field(field: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Decode field vectors at flat cell indices into ``(n, 4)`` lines in cell coordinates."""
    s = field.shape[-1]
    flat = field.reshape(4, -1)[:, cells]
    cx, cy = cells % s + 0.5, cells // s + 0.5
    mx, my = cx + flat[0], cy + flat[1]
    half_len = np.hypot(flat[2], flat[3])
    phi = 0.5 * np.arctan2(flat[3], flat[2])
    dx, dy = half_len * np.cos(phi), half_len * np.sin(phi)
    return np.stack([mx - dx, my - dy, mx + dx, my + dy], axis=1)


# --------------------------------------------------------------------------- proposals


def nms_heatmap(heat: np.ndarray) -> np.ndarray:
    """Zero every cell that is not the maximum of its 3x3 neighborhood (ties survive)."""
    t = torch.from_numpy(np.ascontiguousarray(heat, dtype=np.float64))[None, None]
    pooled = F.max_pool2d(t, 3, stride=1, padding=1)
    keep = (t == pooled)[0, 0].numpy()
    return np.where(keep, heat, 0.0)


def propose_junctions(heat: np.ndarray, offsets: np.ndarray, k: int, threshold: float = 0.0,
                      stride: int = STRIDE) -> np.ndarray:
    """Top-``k`` junctions after 3x3 NMS as ``(J, 3)`` rows ``(x, y, score)`` in input pixels."""
    heat = np.asarray(heat, np.float64)
    s = heat.shape[-1]
    sup = nms_heatmap(heat).ravel()
    order = np.argsort(-sup, kind="stable")
    order = order[sup[order] > threshold][:k]
    off = np.asarray(offsets, np.float64).reshape(2, -1)[:, order]
    x = (order % s + 0.5 + off[0]) * stride
    y = (order // s + 0.5 + off[1]) * stride
    return np.stack([x, y, sup[order]], axis=1)


def dedupe_lines(lines: np.ndarray, scores: np.ndarray, distance: float = 1.0) -> np.ndarray:
    """Indices of kept lines; a line is dropped when a better-scored kept one is closer than ``distance``.

    Input is visited in descending score order; the returned indices follow
    that order.
    """
    order = np.argsort(-np.asarray(scores), kind="stable")
    lines = np.asarray(lines, np.float64)[order]
    n = len(lines)
    suppressed = np.zeros(n, bool)
    keep = []
    for start in range(0, n, _DEDUPE_CHUNK):
        block = pairwise_line_distance(lines[start:start + _DEDUPE_CHUNK], lines) < distance
        for r in range(block.shape[0]):
            i = start + r
            if suppressed[i]:
                continue
            keep.append(i)
            suppressed[i + 1:] |= block[r, i + 1:]
    return order[np.array(keep, dtype=np.int64)]


def propose_lines(mask: np.ndarray, field: np.ndarray, k: int, threshold: float = 0.5,
                  stride: int = STRIDE, dedupe_distance: float = 1.0):
    """Line proposals from the dense field.

    Args:
        mask: ``(S, S)`` confidence that a cell is attended by a line.
        field: ``(4, S, S)`` field in cell units.

    Returns:
        ``(lines, scores)`` with lines ``(n, 4)`` in input pixels, sorted by
        score, deduplicated and truncated to ``k``.
    """
    mask = np.asarray(mask, np.float64)
    flat = mask.ravel()
    cells = np.nonzero(flat > threshold)[0]
    if len(cells) == 0:
        return np.zeros((0, 4)), np.zeros(0)
    lines = decode_field(np.asarray(field, np.float64), cells) * stride
    scores = flat[cells]
    keep = dedupe_lines(lines, scores, dedupe_distance)[:k]
    return lines[keep], scores[keep]


def match_proposals(junctions: np.ndarray, lines: np.ndarray, tau: float):
    """Snap proposal endpoints to their nearest junction.

    Proposals whose endpoints both find a junction within ``tau`` (and two
    different ones) survive with the junction positions as endpoints; later
    proposals mapping to an already seen junction pair are merged into the
    first.

    Returns:
        ``(candidates (m, 4), pairs (m, 2), source (m,))`` where ``source``
        indexes the proposal each candidate came from.
    """
    junctions = np.asarray(junctions, np.float64)[:, :2].reshape(-1, 2)
    lines = np.asarray(lines, np.float64).reshape(-1, 4)
    empty = (np.zeros((0, 4)), np.zeros((0, 2), np.int64), np.zeros(0, np.int64))
    if len(junctions) == 0 or len(lines) == 0:
        return empty
    ends = lines.reshape(-1, 2, 2)
    d = np.linalg.norm(ends[:, :, None, :] - junctions[None, None], axis=-1)
    idx = d.argmin(axis=-1)
    dmin = np.take_along_axis(d, idx[..., None], axis=-1)[..., 0]
    ok = (dmin <= tau).all(axis=1) & (idx[:, 0] != idx[:, 1])
    seen = set()
    cand, pairs, src = [], [], []
    for i in np.nonzero(ok)[0]:
        key = (min(idx[i]), max(idx[i]))
        if key in seen:
            continue
        seen.add(key)
        cand.append(np.concatenate([junctions[idx[i, 0]], junctions[idx[i, 1]]]))
        pairs.append(idx[i])
        src.append(i)
    if not cand:
        return empty
    return np.array(cand), np.array(pairs, np.int64), np.array(src, np.int64)


# --------------------------------------------------------------------------- line-of-interest sampling


def loi_points(lines: torch.Tensor, n: int) -> torch.Tensor:
    """``(L, n, 2)`` points uniformly spaced from the first to the second endpoint."""
    t = torch.linspace(0.0, 1.0, n, dtype=lines.dtype, device=lines.device)[None, :, None]
    return lines[:, None, :2] * (1 - t) + lines[:, None, 2:] * t


def sample_loi(features: torch.Tensor, lines: torch.Tensor, n: int, stride: int = STRIDE) -> torch.Tensor:
    """Bilinearly read ``(C, S, S)`` features at ``n`` points along each line.

    Args:
        lines: ``(L, 4)`` in input pixels; endpoints must lie inside the image.

    Returns:
        ``(L, C, n)``.
    """
    c, h, w = features.shape
    if lines.numel() == 0:
        return features.new_zeros((0, c, n))
    tol = 1e-6
    xs, ys = lines[:, 0::2], lines[:, 1::2]
    if (xs < -tol).any() or (ys < -tol).any() or (xs > w * stride + tol).any() or (ys > h * stride + tol).any():
        raise ValueError("line endpoints must lie inside the feature map")
    pts = loi_points(lines, n) / stride
    grid = torch.stack([2 * pts[..., 0] / w - 1, 2 * pts[..., 1] / h - 1], dim=-1)[None]
    out = F.grid_sample(features[None], grid.to(features.dtype), mode="bilinear", padding_mode="border",
                        align_corners=False)
    return out[0].permute(1, 0, 2)


# --------------------------------------------------------------------------- network


def _branch(cin: int, cout: int) -> nn.Sequential:
    mid = max(cin // 2, 8)
    return nn.Sequential(nn.Conv2d(cin, mid, 3, padding=1), nn.ReLU(inplace=True), nn.Conv2d(mid, cout, 1))


class LineDetector(nn.Module):
    """Backbone plus wireframe head."""

    def __init__(self, backbone_cfg: BackboneConfig, det_cfg: Optional[DetectorConfig] = None):
        super().__init__()
        self.backbone_cfg = backbone_cfg
        self.cfg = det_cfg or DetectorConfig()
        c = backbone_cfg.feature_channels
        self.backbone = build_backbone(backbone_cfg)
        self.jloc = _branch(c, 1)
        self.joff = _branch(c, 2)
        self.mask = _branch(c, 1)
        self.field = _branch(c, 4)
        self.loi_reduce = nn.Conv2d(c, self.cfg.loi_channels, 1)
        d = self.cfg.loi_dim
        self.classifier = nn.Sequential(nn.Linear(d, d), nn.ReLU(inplace=True), nn.Linear(d, d),
                                        nn.ReLU(inplace=True), nn.Linear(d, 1))
        for m in (self.jloc, self.joff, self.mask, self.field, self.loi_reduce, self.classifier):
            init_weights(m)

    @property
    def feature_size(self) -> int:
        return self.backbone_cfg.feature_size

    @property
    def field_scale(self) -> float:
        """Network field outputs are the cell-unit field divided by this."""
        return self.feature_size / 8.0

    def forward(self, image: torch.Tensor, events: torch.Tensor) -> dict:
        feat = self.backbone(image, events)
        return {
            "jloc": self.jloc(feat)[:, 0],
            "joff": torch.sigmoid(self.joff(feat)) - 0.5,
            "mask": self.mask(feat)[:, 0],
            "field": self.field(feat),
            "loi": self.loi_reduce(feat),
        }

    def score_lines(self, loi_features: torch.Tensor, lines: torch.Tensor) -> torch.Tensor:
        """Classifier logits ``(L,)`` for candidate lines on one sample's ``(C, S, S)`` LoI map."""
        cfg = self.cfg
        if len(lines) == 0:
            return loi_features.new_zeros(0)
        samples = sample_loi(loi_features, lines.to(loi_features.dtype), cfg.loi_points)
        pooled = F.max_pool1d(samples, cfg.loi_pool, cfg.loi_pool)
        return self.classifier(pooled.flatten(1))[:, 0]

    def fields_to_numpy(self, out: dict, i: int) -> dict:
        return {
            "jmap": torch.sigmoid(out["jloc"][i]).detach().cpu().double().numpy(),
            "joff": out["joff"][i].detach().cpu().double().numpy(),
            "mask": torch.sigmoid(out["mask"][i]).detach().cpu().double().numpy(),
            "field": out["field"][i].detach().cpu().double().numpy() * self.field_scale,
        }

    @torch.no_grad()
    def detect(self, image: torch.Tensor, events: torch.Tensor) -> list[dict]:
        """Per-sample ``{"lines": (n, 5), "junctions": (J, 3)}`` in input pixels."""
        out = self.forward(image, events)
        results = []
        for i in range(image.shape[0]):
            loi = out["loi"][i]

            def scorer(cand, _f=None, loi=loi):
                logits = self.score_lines(loi, torch.as_tensor(cand, dtype=loi.dtype))
                return torch.sigmoid(logits).double().cpu().numpy()

            results.append(decode_predictions(self.fields_to_numpy(out, i), self.cfg, scorer))
        return results


def candidates_from_fields(fields: dict, cfg: DetectorConfig):
    """Junctions and junction-snapped line candidates from dense (numpy) head outputs."""
    junctions = propose_junctions(fields["jmap"], fields["joff"], cfg.num_junctions, cfg.junction_threshold)
    props, _ = propose_lines(fields["mask"], fields["field"], cfg.num_line_proposals, cfg.mask_threshold,
                             dedupe_distance=cfg.dedupe_distance)
    cand, pairs, _ = match_proposals(junctions, props, cfg.tau_match)
    return junctions, cand, pairs


def field_scorer(cand: np.ndarray, fields: dict, junctions: np.ndarray, pairs: np.ndarray,
                 n: int = 32) -> np.ndarray:
    """Classifier-free score: mean line mask along the candidate times its junction confidence."""
    if len(cand) == 0:
        return np.zeros(0)
    m = torch.from_numpy(fields["mask"])[None]
    along = sample_loi(m, torch.from_numpy(cand), n)[:, 0].mean(dim=1).numpy()
    js = junctions[:, 2]
    return np.clip(along * np.sqrt(js[pairs[:, 0]] * js[pairs[:, 1]]), 0.0, 1.0)


def decode_predictions(fields: dict, cfg: DetectorConfig, scorer: Optional[Callable] = None) -> dict:
    """Full decoding of one sample.

    Args:
        fields: ``jmap``, ``joff``, ``mask`` probabilities and ``field`` in
            cell units, as produced by :func:`encode_targets` or the network.
        scorer: ``scorer(candidates, fields) -> scores``; defaults to
            :func:`field_scorer`.
    """
    junctions, cand, pairs = candidates_from_fields(fields, cfg)
    if scorer is None:
        scores = field_scorer(cand, fields, junctions, pairs)
    else:
        scores = np.asarray(scorer(cand, fields), np.float64).reshape(-1)
    keep = scores > cfg.score_threshold
    cand, scores = cand[keep], scores[keep]
    order = np.argsort(-scores, kind="stable")
    lines = np.concatenate([cand[order], scores[order, None]], axis=1) if len(order) else np.zeros((0, 5))
    return {"lines": lines, "junctions": junctions}


# --------------------------------------------------------------------------- training


def lr_at_epoch(epoch: int, base_lr: float = 4e-4, decay_epoch: int = 25, factor: float = 0.1) -> float:
    """Step schedule with 1-based epochs: ``base_lr`` until ``decay_epoch``, then scaled by ``factor``."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    return base_lr * (factor if epoch > decay_epoch else 1.0)


def make_optimizer(model: nn.Module, lr: float = 4e-4, weight_decay: float = 1e-4) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr, weight_decay=weight_decay)


def _static_negatives(gt: np.ndarray, rng: np.random.Generator, limit: int) -> np.ndarray:
    """Pairs of ground-truth junctions that are not ground-truth lines."""
    junc = unique_junctions(gt)
    if len(junc) < 2:
        return np.zeros((0, 4))
    i, k = np.triu_indices(len(junc), 1)
    pairs = np.concatenate([junc[i], junc[k]], axis=1)
    d = pairwise_line_distance(pairs, gt).min(axis=1)
    neg = pairs[d > 1e-6]
    if len(neg) > limit:
        neg = neg[rng.choice(len(neg), limit, replace=False)]
    return neg


def _subsample(idx: np.ndarray, limit: int, rng: np.random.Generator) -> np.ndarray:
    return idx if len(idx) <= limit else rng.choice(idx, limit, replace=False)


def classifier_samples(cand: np.ndarray, gt: np.ndarray, cfg: DetectorConfig, rng: np.random.Generator):
    """Lines and 0/1 labels for the classifier loss of one sample."""
    gt = np.asarray(gt, np.float64).reshape(-1, 4)
    lines, labels = [], []
    if len(cand) and len(gt):
        d = pairwise_line_distance(cand, gt).min(axis=1)
        pos = _subsample(np.nonzero(d < cfg.positive_distance)[0], cfg.num_pos, rng)
        neg = _subsample(np.nonzero(d >= cfg.positive_distance)[0], cfg.num_neg, rng)
        lines += [cand[pos], cand[neg]]
        labels += [np.ones(len(pos)), np.zeros(len(neg))]
    elif len(cand):
        neg = _subsample(np.arange(len(cand)), cfg.num_neg, rng)
        lines.append(cand[neg])
        labels.append(np.zeros(len(neg)))
    if len(gt):
        g = gt[_subsample(np.arange(len(gt)), cfg.num_gt_pos, rng)]
        lines.append(g)
        labels.append(np.ones(len(g)))
        if cfg.static_negatives:
            sn = _static_negatives(gt, rng, cfg.num_neg)
            lines.append(sn)
            labels.append(np.zeros(len(sn)))
    if not lines:
        return np.zeros((0, 4)), np.zeros(0)
    return np.concatenate(lines), np.concatenate(labels)


def compute_losses(model: LineDetector, out: dict, gt_lines: list, rng: np.random.Generator) -> dict:
    """Per-term losses for a batch of head outputs and input-pixel ground-truth lines."""
    cfg = model.cfg
    s = model.feature_size
    targets = [encode_targets(np.asarray(g, np.float64).reshape(-1, 4) / STRIDE, s, cfg.field_band)
               for g in gt_lines]

    def stack(key):
        arr = np.stack([t[key] for t in targets])
        return torch.from_numpy(arr).to(out["jloc"].dtype)

    jmap, joff, mask, fld = stack("jmap"), stack("joff"), stack("mask"), stack("field") / model.field_scale
    losses = {"jloc": F.binary_cross_entropy_with_logits(out["jloc"], jmap),
              "mask": F.binary_cross_entropy_with_logits(out["mask"], mask)}
    jpos = jmap > 0.5
    zero = out["jloc"].sum() * 0.0
    if jpos.any():
        pred = out["joff"].permute(0, 2, 3, 1)[jpos]
        losses["joff"] = F.smooth_l1_loss(pred, joff.permute(0, 2, 3, 1)[jpos], beta=0.1)
    else:
        losses["joff"] = zero
    mpos = mask > 0.5
    if mpos.any():
        pred = out["field"].permute(0, 2, 3, 1)[mpos]
        losses["field"] = F.smooth_l1_loss(pred, fld.permute(0, 2, 3, 1)[mpos], beta=0.1)
    else:
        losses["field"] = zero

    logits, labels = [], []
    for i, gt in enumerate(gt_lines):
        fields = model.fields_to_numpy(out, i)
        _, cand, _ = candidates_from_fields(fields, cfg)
        lines, lab = classifier_samples(cand, gt, cfg, rng)
        if len(lines):
            logits.append(model.score_lines(out["loi"][i], torch.from_numpy(lines)))
            labels.append(torch.from_numpy(lab))
    if logits:
        lg = torch.cat(logits)
        losses["cls"] = F.binary_cross_entropy_with_logits(lg, torch.cat(labels).to(lg.dtype))
    else:
        losses["cls"] = zero
    losses["total"] = sum(cfg.loss_weights.get(k, 1.0) * v for k, v in losses.items())
    return losses


def train_step(batch: dict, model: LineDetector, optimizer: torch.optim.Optimizer,
               rng: Optional[np.random.Generator] = None) -> dict:
    """One optimizer update on ``batch = {"image", "events", "lines"}``.

    Returns:
        Float value of every loss term plus ``total``.
    """
    if batch is None or len(batch.get("lines", [])) == 0 or batch["image"].shape[0] == 0:
        raise ValueError("empty batch")
    if batch["image"].shape[0] != len(batch["lines"]):
        raise ShapeError("batch image count and annotation count differ")
    rng = rng if rng is not None else np.random.default_rng()
    model.train()
    out = model(batch["image"], batch["events"])
    losses = compute_losses(model, out, batch["lines"], rng)
    optimizer.zero_grad(set_to_none=True)
    losses["total"].backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}
