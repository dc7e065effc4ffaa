"""Line and junction detection metrics.

Line predictions are ``(n, 5)`` arrays of ``x0, y0, x1, y1, score``; ground
truth lines are ``(m, 4)``. Junction predictions are ``(n, 3)`` arrays of
``x, y, score`` and ground truth junctions ``(m, 2)``. Before matching, all
coordinates are rescaled from their image size to a square evaluation grid
(128 x 128 by default), so thresholds are expressed in evaluation pixels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .event_model import LineSegment

EVAL_SIZE = 128
SAP_THRESHOLDS = (5.0, 10.0, 15.0)
JUNCTION_THRESHOLDS = (0.5, 1.0, 2.0)
HEATMAP_THRESHOLDS = tuple(np.round(np.linspace(0.01, 0.99, 99), 2))


def line_distance(l, l_hat) -> float:
    """Mean endpoint distance under the better of the two endpoint pairings."""
    a = np.asarray(l, dtype=np.float64).reshape(2, 2)
    b = np.asarray(l_hat, dtype=np.float64).reshape(2, 2)
    straight = np.linalg.norm(a[0] - b[0]) + np.linalg.norm(a[1] - b[1])
    crossed = np.linalg.norm(a[0] - b[1]) + np.linalg.norm(a[1] - b[0])
    return 0.5 * float(min(straight, crossed))


def pairwise_line_distance(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Vectorized :func:`line_distance` between every prediction and GT line."""
    p = np.asarray(pred, dtype=np.float64)[:, None, :4].reshape(-1, 1, 2, 2)
    g = np.asarray(gt, dtype=np.float64)[None, :, :4].reshape(1, -1, 2, 2)
    straight = np.linalg.norm(p[:, :, 0] - g[:, :, 0], axis=-1) + np.linalg.norm(p[:, :, 1] - g[:, :, 1], axis=-1)
    crossed = np.linalg.norm(p[:, :, 0] - g[:, :, 1], axis=-1) + np.linalg.norm(p[:, :, 1] - g[:, :, 0], axis=-1)
    return 0.5 * np.minimum(straight, crossed)


def _as_scored(pred, width: int) -> np.ndarray:
    if isinstance(pred, (list, tuple)) and pred and isinstance(pred[0], LineSegment):
        if any(ln.score is None for ln in pred):
            raise ValueError("predicted lines must carry scores")
        return np.array([[*ln.p0, *ln.p1, ln.score] for ln in pred], dtype=np.float64)
    arr = np.asarray(pred, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, width + 1))
    if arr.ndim != 2 or arr.shape[1] != width + 1:
        raise ValueError(f"predictions must be (n, {width + 1}) with a score column, got {arr.shape}")
    return arr


def _as_points(gt, width: int) -> np.ndarray:
    if isinstance(gt, (list, tuple)) and gt and isinstance(gt[0], LineSegment):
        return np.array([[*ln.p0, *ln.p1] for ln in gt], dtype=np.float64)
    arr = np.asarray(gt, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, width))
    return arr[:, :width]


def _scale_factors(image_size, eval_size: Optional[int]) -> np.ndarray:
    if image_size is None or eval_size is None:
        return np.ones(2)
    w, h = image_size
    return np.array([eval_size / w, eval_size / h], dtype=np.float64)


def _sample_sizes(image_sizes, n: int):
    if image_sizes is None:
        return [None] * n
    if len(image_sizes) == 2 and np.isscalar(image_sizes[0]):
        return [tuple(image_sizes)] * n
    return list(image_sizes)


def greedy_match(dist: np.ndarray, threshold: float) -> np.ndarray:
    """Label rows of ``dist`` (already in descending-score order) as TP/FP.

    A row is a true positive when its closest still-unmatched column lies
    strictly closer than ``threshold``; that column is then consumed.
    """
    n, m = dist.shape
    tp = np.zeros(n, dtype=bool)
    if m == 0:
        return tp
    free = np.ones(m, dtype=bool)
    for i in range(n):
        if not free.any():
            break
        d = np.where(free, dist[i], np.inf)
        j = int(np.argmin(d))
        if d[j] < threshold:
            tp[i] = True
            free[j] = False
    return tp


def average_precision(tp: np.ndarray, n_gt: int) -> tuple[float, np.ndarray, np.ndarray]:
    """All-point interpolated AP for detections already sorted by score.

    Returns AP in ``[0, 1]`` plus the raw precision and recall sequences.
    """
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt == 0 or tp.size == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    ap = float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))
    return ap, precision, recall


def _ranked_matches(preds, gts, threshold, image_sizes, eval_size, dim, dist_fn):
    """Match every sample, then merge detections into one global ranking."""
    sizes = _sample_sizes(image_sizes, len(preds))
    if len(preds) != len(gts):
        raise ValueError("predictions and ground truth cover different numbers of samples")
    scores, flags, n_gt = [], [], 0
    for pred, gt, size in zip(preds, gts, sizes):
        p = _as_scored(pred, dim)
        g = _as_points(gt, dim)
        scale = np.tile(_scale_factors(size, eval_size), dim // 2)
        order = np.argsort(-p[:, -1], kind="stable")
        p = p[order]
        coords = p[:, :dim] * scale
        d = dist_fn(coords, g * scale) if len(g) else np.zeros((len(p), 0))
        flags.append(greedy_match(d, threshold))
        scores.append(p[:, -1])
        n_gt += len(g)
    if not scores:
        return np.zeros(0), np.zeros(0, bool), 0
    scores = np.concatenate(scores)
    flags = np.concatenate(flags)
    order = np.argsort(-scores, kind="stable")
    return scores[order], flags[order], n_gt


def structural_ap(preds_by_sample, gts_by_sample, threshold: float, image_sizes=None,
                  eval_size: Optional[int] = EVAL_SIZE, return_curve: bool = False):
    """Structural AP (percent) of line predictions at a line-distance threshold.

    Args:
        preds_by_sample: per sample, scored lines as ``(n, 5)`` arrays or
            lists of scored LineSegment.
        gts_by_sample: per sample, ground truth lines ``(m, 4)``.
        threshold: distance threshold in evaluation-grid pixels.
        image_sizes: ``(W, H)`` shared by all samples or one per sample.
            ``None`` means coordinates are already on the evaluation grid.
        eval_size: side of the evaluation grid.
    """
    scores, tp, n_gt = _ranked_matches(preds_by_sample, gts_by_sample, threshold, image_sizes,
                                       eval_size, 4, pairwise_line_distance)
    ap, precision, recall = average_precision(tp, n_gt)
    if return_curve:
        return 100.0 * ap, {"score": scores, "precision": precision, "recall": recall}
    return 100.0 * ap


def _point_distance(a, b):
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)


def junction_ap(preds_by_sample, gts_by_sample, threshold: float, image_sizes=None,
                eval_size: Optional[int] = EVAL_SIZE) -> float:
    _, tp, n_gt = _ranked_matches(preds_by_sample, gts_by_sample, threshold, image_sizes,
                                  eval_size, 2, _point_distance)
    return 100.0 * average_precision(tp, n_gt)[0]


def junction_map(preds_by_sample, gts_by_sample, image_sizes=None, eval_size: Optional[int] = EVAL_SIZE,
                 thresholds: Sequence[float] = JUNCTION_THRESHOLDS) -> float:
    """Mean junction AP (percent) over the distance thresholds 0.5, 1 and 2."""
    aps = [junction_ap(preds_by_sample, gts_by_sample, t, image_sizes, eval_size) for t in thresholds]
    return float(np.mean(aps))


def junctions_from_lines(lines: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Unique endpoints of a set of lines."""
    lines = np.asarray(lines, dtype=np.float64).reshape(-1, 4)
    pts = lines.reshape(-1, 2)
    out: list[np.ndarray] = []
    for p in pts:
        if not any(np.linalg.norm(p - q) <= tol for q in out):
            out.append(p)
    return np.array(out).reshape(-1, 2)


# -- heatmap metrics -----------------------------------------------------------

def rasterize_lines(lines: np.ndarray, size: int = EVAL_SIZE) -> np.ndarray:
    """Boolean ``size x size`` mask of the pixels crossed by each segment."""
    mask = np.zeros((size, size), dtype=bool)
    for x0, y0, x1, y1 in np.asarray(lines, dtype=np.float64).reshape(-1, 4):
        n = int(np.ceil(2.0 * np.hypot(x1 - x0, y1 - y0))) + 1
        s = np.linspace(0.0, 1.0, n)
        xs = np.floor(x0 + s * (x1 - x0)).astype(int)
        ys = np.floor(y0 + s * (y1 - y0)).astype(int)
        ok = (xs >= 0) & (xs < size) & (ys >= 0) & (ys < size)
        mask[ys[ok], xs[ok]] = True
    return mask


_NEIGHBORS = ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1))


def matched_pixels(pred_mask: np.ndarray, gt_mask: np.ndarray) -> int:
    """Size of a maximum one-to-one matching between predicted and GT pixels within 1 px."""
    py, px = np.nonzero(pred_mask)
    if py.size == 0 or not gt_mask.any():
        return 0
    h, w = gt_mask.shape
    gt_index = -np.ones(gt_mask.shape, dtype=np.int64)
    gy, gx = np.nonzero(gt_mask)
    gt_index[gy, gx] = np.arange(gy.size)
    rows, cols = [], []
    for dy, dx in _NEIGHBORS:
        yy, xx = py + dy, px + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.full(py.size, -1)
        idx[ok] = gt_index[yy[ok], xx[ok]]
        hit = idx >= 0
        rows.append(np.flatnonzero(hit))
        cols.append(idx[hit])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    graph = csr_matrix((np.ones(rows.size), (rows, cols)), shape=(py.size, gy.size))
    match = maximum_bipartite_matching(graph, perm_type="column")
    return int(np.sum(match >= 0))


def heatmap_pr(preds_by_sample, gts_by_sample, image_sizes=None, eval_size: int = EVAL_SIZE,
               thresholds: Sequence[float] = HEATMAP_THRESHOLDS):
    """Pixel-level precision and recall swept over score thresholds."""
    sizes = _sample_sizes(image_sizes, len(preds_by_sample))
    gt_masks, preds = [], []
    for pred, gt, size in zip(preds_by_sample, gts_by_sample, sizes):
        scale = np.tile(_scale_factors(size, eval_size), 2)
        g = _as_points(gt, 4)
        gt_masks.append(rasterize_lines(g * scale, eval_size))
        p = _as_scored(pred, 4)
        preds.append((p[:, :4] * scale, p[:, 4]))
    n_gt = sum(int(m.sum()) for m in gt_masks)
    precision, recall, used = [], [], []
    for thr in thresholds:
        n_pred = 0
        n_match = 0
        for (coords, scores), gmask in zip(preds, gt_masks):
            pmask = rasterize_lines(coords[scores >= thr], eval_size)
            n_pred += int(pmask.sum())
            n_match += matched_pixels(pmask, gmask)
        if n_pred == 0 or n_gt == 0:
            continue
        precision.append(n_match / n_pred)
        recall.append(n_match / n_gt)
        used.append(thr)
    return np.array(used), np.array(precision), np.array(recall)


def heatmap_ap(preds_by_sample, gts_by_sample, image_sizes=None, eval_size: int = EVAL_SIZE,
               thresholds: Sequence[float] = HEATMAP_THRESHOLDS, return_curve: bool = False):
    """Heatmap AP and max F-score, both in percent."""
    used, precision, recall = heatmap_pr(preds_by_sample, gts_by_sample, image_sizes, eval_size, thresholds)
    if used.size == 0:
        result = (0.0, 0.0)
    else:
        order = np.argsort(recall, kind="stable")
        mrec = np.concatenate([[0.0], recall[order], [recall.max()]])
        mpre = np.concatenate([[precision[order][0]], precision[order], [0.0]])
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        ap = float(np.sum(np.diff(mrec) * mpre[1:]))
        with np.errstate(invalid="ignore", divide="ignore"):
            f = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
        result = (100.0 * ap, 100.0 * float(f.max()))
    if return_curve:
        return result, {"score": used, "precision": precision, "recall": recall}
    return result


# -- reports -------------------------------------------------------------------

@dataclass
class EvalReport:
    sAP5: float
    sAP10: float
    sAP15: float
    msAP: float
    mAPJ: float
    APH: float
    FH: float
    curves: dict = field(default_factory=dict)
    per_sample: list = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("curves")
        d.pop("per_sample")
        return d

    def to_json(self, path) -> None:
        payload = self.summary()
        payload["per_sample"] = self.per_sample
        Path(path).write_text(json.dumps(payload, indent=1))

    def write_curves(self, directory) -> list[Path]:
        """One CSV per curve with columns ``threshold, precision, recall``."""
        directory = Path(directory)
        written = []
        for name, curve in self.curves.items():
            path = directory / f"pr_{name}.csv"
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["threshold", "precision", "recall"])
                for row in zip(curve["score"], curve["precision"], curve["recall"]):
                    writer.writerow([f"{v:.6f}" for v in row])
            written.append(path)
        return written


def msap(preds_by_sample, gts_by_sample, image_sizes=None, eval_size: Optional[int] = EVAL_SIZE) -> float:
    saps = [structural_ap(preds_by_sample, gts_by_sample, t, image_sizes, eval_size) for t in SAP_THRESHOLDS]
    return sum(saps) / 3.0


def evaluate(pred_lines, gt_lines, pred_junctions=None, gt_junctions=None, image_sizes=None,
             eval_size: int = EVAL_SIZE, sample_ids: Optional[Sequence[str]] = None,
             with_heatmap: bool = True) -> EvalReport:
    """Compute every line, junction and heatmap metric over a set of samples."""
    n = len(pred_lines)
    sap = {}
    curves = {}
    for t in SAP_THRESHOLDS:
        sap[t], curves[f"sAP{int(t)}"] = structural_ap(pred_lines, gt_lines, t, image_sizes, eval_size,
                                                       return_curve=True)
    mean_sap = (sap[5.0] + sap[10.0] + sap[15.0]) / 3.0
    if gt_junctions is None:
        gt_junctions = [junctions_from_lines(_as_points(g, 4)) for g in gt_lines]
    if pred_junctions is None:
        pred_junctions = [np.zeros((0, 3)) for _ in range(n)]
    mapj = junction_map(pred_junctions, gt_junctions, image_sizes, eval_size)
    if with_heatmap:
        (aph, fh), curves["APH"] = heatmap_ap(pred_lines, gt_lines, image_sizes, eval_size, return_curve=True)
    else:
        aph, fh = 0.0, 0.0
    ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(n)]
    sizes = _sample_sizes(image_sizes, n)
    per_sample = []
    for i in range(n):
        per_sample.append({
            "id": ids[i],
            "msAP": msap([pred_lines[i]], [gt_lines[i]], None if sizes[i] is None else sizes[i], eval_size),
            "num_pred": int(len(_as_scored(pred_lines[i], 4))),
            "num_gt": int(len(_as_points(gt_lines[i], 4))),
        })
    return EvalReport(sap[5.0], sap[10.0], sap[15.0], mean_sap, mapj, aph, fh, curves, per_sample)


def blur_binned_msap(preds_by_sample, gts_by_sample, blur_magnitudes, bin_width: float = 10.0,
                     max_blur: float = 60.0, image_sizes=None, eval_size: int = EVAL_SIZE) -> list[dict]:
    """msAP per blur-magnitude bin; empty bins are omitted.

    Bins are ``[k * bin_width, (k + 1) * bin_width)`` up to ``max_blur``;
    larger blur values fall into the last bin.
    """
    blur = np.asarray(blur_magnitudes, dtype=np.float64)
    if blur.shape[0] != len(preds_by_sample):
        raise ValueError("one blur magnitude per sample is required")
    n_bins = max(1, int(np.ceil(max_blur / bin_width)))
    which = np.minimum(np.floor(blur / bin_width).astype(int), n_bins - 1)
    sizes = _sample_sizes(image_sizes, len(preds_by_sample))
    out = []
    for b in range(n_bins):
        idx = np.flatnonzero(which == b)
        if idx.size == 0:
            continue
        ps = [preds_by_sample[i] for i in idx]
        gs = [gts_by_sample[i] for i in idx]
        sz = None if image_sizes is None else [sizes[i] for i in idx]
        out.append({"bin_lo": b * bin_width, "bin_hi": (b + 1) * bin_width, "count": int(idx.size),
                    "msAP": msap(ps, gs, sz, eval_size)})
    return out
