"""Tracking objective: heatmap focal loss + L1 + GIoU, with analytic gradients.

Boxes here are normalized ``(cx, cy, w, h)`` arrays in search-region units.
Every function returns ``(value, gradient)``; box gradients are with respect
to the predicted box.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .model import HeadOutput

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0


@dataclass(frozen=True)
class LossWeights:
    focal: float = 1.0
    l1: float = 1.0
    giou: float = 14.0

    def __post_init__(self):
        if min(self.focal, self.l1, self.giou) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


def center_cell(cx: float, cy: float, map_size: int) -> tuple[int, int]:
    """(row, col) of the map cell containing a normalized center."""
    i = min(max(int(np.floor(cy * map_size)), 0), map_size - 1)
    j = min(max(int(np.floor(cx * map_size)), 0), map_size - 1)
    return i, j


def gaussian_target(box: np.ndarray, map_size: int = 16) -> np.ndarray:
    """Gaussian bump peaking at exactly 1 on the center cell.

    Radius is a quarter of the box's smaller side in cells (at least one
    cell); sigma follows the usual ``(2r + 1) / 6``.
    """
    cx, cy, w, h = (float(v) for v in box)
    ci, cj = center_cell(cx, cy, map_size)
    radius = max(1.0, 0.25 * min(w, h) * map_size)
    return _gaussian(ci, cj, radius, map_size).copy()


@lru_cache(maxsize=4096)
def _gaussian(ci: int, cj: int, radius: float, map_size: int) -> np.ndarray:
    sigma = (2 * radius + 1) / 6.0
    ii, jj = np.mgrid[0:map_size, 0:map_size]
    return np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * sigma * sigma))


def focal_loss(pred: np.ndarray, target: np.ndarray, alpha: float = FOCAL_ALPHA,
               beta: float = FOCAL_BETA, binary: bool = False) -> tuple[float, np.ndarray]:
    """Penalty-reduced focal loss on a center heatmap.

    Cells with ``target == 1`` are positives; the rest are negatives down-
    weighted by ``(1 - target) ** beta``. ``binary=True`` drops that
    down-weighting (plain focal loss on hard labels).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} vs target {target.shape}")
    if (pred <= 0).any() or (pred >= 1).any():
        raise ValueError("focal loss needs predictions strictly inside (0, 1)")
    pos = target == 1.0
    n_pos = max(int(pos.sum()), 1)
    neg_w = np.ones_like(target) if binary else (1.0 - target) ** beta
    p = pred
    logp, log1mp = np.log(p), np.log1p(-p)
    pos_term = (1 - p) ** alpha * logp
    neg_term = neg_w * p ** alpha * log1mp
    d_pos = -alpha * (1 - p) ** (alpha - 1) * logp + (1 - p) ** alpha / p
    d_neg = neg_w * (alpha * p ** (alpha - 1) * log1mp - p ** alpha / (1 - p))
    value = -(np.where(pos, pos_term, neg_term).sum()) / n_pos
    grad = -np.where(pos, d_pos, d_neg) / n_pos
    return float(value), grad


def l1_loss(gt: np.ndarray, pred: np.ndarray) -> tuple[float, np.ndarray]:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return float(np.abs(d).mean()), np.sign(d) / d.size


def _corners(box):
    cx, cy, w, h = (float(v) for v in box)
    if not (w > 0 and h > 0):
        raise ValueError(f"degenerate box {tuple(box)}")
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def box_iou(a: np.ndarray, b: np.ndarray) -> float:
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
    ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
    inter = iw * ih
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def giou_loss(gt: np.ndarray, pred: np.ndarray) -> tuple[float, np.ndarray]:
    """``1 - GIoU`` in [0, 2) and its gradient w.r.t. ``pred``."""
    gx1, gy1, gx2, gy2 = _corners(gt)
    px1, py1, px2, py2 = _corners(pred)
    pw, ph = px2 - px1, py2 - py1

    iw_raw = min(px2, gx2) - max(px1, gx1)
    ih_raw = min(py2, gy2) - max(py1, gy1)
    iw, ih = max(iw_raw, 0.0), max(ih_raw, 0.0)
    inter = iw * ih
    union = pw * ph + (gx2 - gx1) * (gy2 - gy1) - inter
    cw = max(px2, gx2) - min(px1, gx1)
    ch = max(py2, gy2) - min(py1, gy1)
    hull = cw * ch
    value = 2.0 - inter / union - union / hull

    # d(width terms)/d(px1, px2), d(height terms)/d(py1, py2)
    diw = np.array([-1.0 if (iw_raw > 0 and px1 > gx1) else 0.0,
                    1.0 if (iw_raw > 0 and px2 < gx2) else 0.0])
    dih = np.array([-1.0 if (ih_raw > 0 and py1 > gy1) else 0.0,
                    1.0 if (ih_raw > 0 and py2 < gy2) else 0.0])
    dcw = np.array([-1.0 if px1 < gx1 else 0.0, 1.0 if px2 > gx2 else 0.0])
    dch = np.array([-1.0 if py1 < gy1 else 0.0, 1.0 if py2 > gy2 else 0.0])

    # order: x1, x2, y1, y2
    d_inter = np.concatenate([ih * diw, iw * dih])
    d_area = np.array([-ph, ph, -pw, pw])
    d_hull = np.concatenate([ch * dcw, cw * dch])
    d_union = d_area - d_inter
    g = -(d_inter * union - inter * d_union) / union ** 2 - (d_union * hull - union * d_hull) / hull ** 2
    gx1_, gx2_, gy1_, gy2_ = g
    grad = np.array([gx1_ + gx2_, gy1_ + gy2_, (gx2_ - gx1_) / 2, (gy2_ - gy1_) / 2])
    return float(value), grad


class TotalLoss(NamedTuple):
    value: float
    grad: HeadOutput
    parts: dict[str, float]


def decode_at_cell(head: HeadOutput, i: int, j: int) -> np.ndarray:
    s = head.map_size
    return np.array([(j + head.offset[i, j, 0]) / s, (i + head.offset[i, j, 1]) / s,
                     head.size[i, j, 0], head.size[i, j, 1]])


def total_loss(head: HeadOutput, gt: np.ndarray, weights: LossWeights = LossWeights(),
               binary_focal: bool = False) -> TotalLoss:
    """Weighted objective with gradients for all three head maps.

    The predicted box is read at the ground-truth center cell rather than the
    score peak, so offsets and sizes receive gradient at exactly one cell.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if not (0 <= gt[0] < 1 and 0 <= gt[1] < 1):
        raise ValueError(f"ground-truth center {gt[:2]} outside the search region")
    s = head.map_size
    i, j = center_cell(gt[0], gt[1], s)
    target = gaussian_target(gt, s)
    f, df = focal_loss(head.score, target, binary=binary_focal)
    pred = decode_at_cell(head, i, j)
    l1, dl1 = l1_loss(gt, pred)
    gi, dgi = giou_loss(gt, pred)

    dbox = weights.l1 * dl1 + weights.giou * dgi
    d_offset = np.zeros_like(head.offset)
    d_size = np.zeros_like(head.size)
    d_offset[i, j] = dbox[:2] / s
    d_size[i, j] = dbox[2:]
    parts = {"focal": weights.focal * f, "l1": weights.l1 * l1, "giou": weights.giou * gi}
    value = parts["focal"] + parts["l1"] + parts["giou"]
    return TotalLoss(value, HeadOutput(weights.focal * df, d_offset, d_size), parts)
