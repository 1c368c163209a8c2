"""One-pass evaluation: success / precision / normalized precision, attributes and BOC.

Conventions:

* success(θ) counts frames with IoU strictly greater than θ, θ on a 101-point
  grid over [0, 1]; SR is the curve mean x 100. A perfect tracker therefore
  scores 100 * 100/101 (the θ = 1 point is always 0).
* precision(d) counts center errors <= d pixels, d = 0..50; PR = precision(20) x 100.
* normalized precision uses the error scaled by the ground-truth size, on
  51 points over [0, 0.5]; NPR is the curve mean x 100.
* Frames flagged absent are dropped from every denominator.
* Aggregates average per-video curves (each video weighs the same).
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .boxes import BBox, TrackAnnotation, boxes_to_array
from .event_io import ATTRIBUTES

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 101)
PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 51)
PRECISION_AT = 20


def iou(a: BBox, b: BBox) -> float:
    return float(iou_array(np.asarray([a], float), np.asarray([b], float))[0])


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of (N, 4) xywh boxes; 0 where the union is empty, NaN boxes give 0."""
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = iw * ih
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.nan_to_num(out, nan=0.0)


def _centers(boxes: np.ndarray) -> np.ndarray:
    return boxes[:, :2] + boxes[:, 2:] / 2.0


def center_error(a: BBox, b: BBox) -> float:
    return float(np.hypot(a.cx - b.cx, a.cy - b.cy))


def normalized_center_error(pred: BBox, gt: BBox) -> float:
    if not (gt.w > 0 and gt.h > 0):
        raise ValueError(f"normalized error undefined for degenerate ground truth {gt}")
    return float(np.hypot((pred.cx - gt.cx) / gt.w, (pred.cy - gt.cy) / gt.h))


@dataclass
class Curves:
    success: np.ndarray
    precision: np.ndarray
    norm_precision: np.ndarray
    n_frames: int = 0

    @property
    def sr(self) -> float:
        return float(self.success.mean() * 100.0)

    @property
    def pr(self) -> float:
        return float(self.precision[PRECISION_AT] * 100.0)

    @property
    def npr(self) -> float:
        return float(self.norm_precision.mean() * 100.0)

    def scores(self) -> dict[str, float]:
        return {"SR": self.sr, "PR": self.pr, "NPR": self.npr}

    def to_json(self) -> dict:
        return {**self.scores(), "n_frames": self.n_frames, "success": self.success.tolist(),
                "precision": self.precision.tolist(), "norm_precision": self.norm_precision.tolist()}


@dataclass
class VideoResult:
    video_id: str
    predictions: list[BBox]
    gt: list[TrackAnnotation]
    attributes: frozenset[str] = frozenset()


def video_curves(result: VideoResult) -> Curves | None:
    """Per-video curves, or ``None`` (with a warning) if every frame is absent."""
    if len(result.predictions) != len(result.gt):
        raise ValueError(f"video {result.video_id}: {len(result.predictions)} predictions "
                         f"for {len(result.gt)} ground-truth frames")
    keep = [i for i, a in enumerate(result.gt) if not a.absent]
    if not keep:
        log.warning("video %s: all frames absent, excluded", result.video_id)
        return None
    pred = boxes_to_array(result.predictions[i] for i in keep)
    gt = boxes_to_array(result.gt[i].box for i in keep)

    ious = iou_array(pred, gt)
    d = _centers(pred) - _centers(gt)
    err = np.nan_to_num(np.hypot(d[:, 0], d[:, 1]), nan=np.inf)
    valid = (gt[:, 2] > 0) & (gt[:, 3] > 0)
    if not valid.all():
        log.warning("video %s: %d frames with degenerate ground truth skipped for NPR",
                    result.video_id, int((~valid).sum()))
    with np.errstate(divide="ignore", invalid="ignore"):
        nerr = np.hypot(d[valid, 0] / gt[valid, 2], d[valid, 1] / gt[valid, 3])
    nerr = np.nan_to_num(nerr, nan=np.inf)

    success = (ious[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    precision = (err[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    if nerr.size:
        norm_precision = (nerr[None, :] <= NORM_PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    else:
        norm_precision = np.zeros_like(NORM_PRECISION_THRESHOLDS)
    return Curves(success, precision, norm_precision, len(keep))


def mean_curves(curves: Sequence[Curves]) -> Curves:
    return Curves(
        np.mean([c.success for c in curves], axis=0),
        np.mean([c.precision for c in curves], axis=0),
        np.mean([c.norm_precision for c in curves], axis=0),
        sum(c.n_frames for c in curves),
    )


# --- BOC -------------------------------------------------------------------


@dataclass
class BaselineSRTable:
    video_ids: list[str]
    trackers: list[str]
    sr: np.ndarray  # (T, N) fractions

    def __post_init__(self):
        self.sr = np.asarray(self.sr, dtype=np.float64)
        if self.sr.shape != (len(self.trackers), len(self.video_ids)):
            raise ValueError(f"table shape {self.sr.shape} does not match "
                             f"{len(self.trackers)} trackers x {len(self.video_ids)} videos")
        if not np.isfinite(self.sr).all() or (self.sr < 0).any() or (self.sr > 1).any():
            raise ValueError("baseline SR entries must be fractions in [0, 1]")

    def subset(self, video_ids: Sequence[str]) -> "BaselineSRTable":
        index = {v: i for i, v in enumerate(self.video_ids)}
        missing = [v for v in video_ids if v not in index]
        if missing:
            raise ValueError(f"baseline table lacks videos {missing[:5]}")
        cols = [index[v] for v in video_ids]
        return BaselineSRTable(list(video_ids), self.trackers, self.sr[:, cols])


def parse_baseline_table(text: str) -> BaselineSRTable:
    """CSV with header ``video_id,tracker1,...,trackerT`` and fractional SR entries."""
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError("empty baseline table")
    header = [c.strip() for c in rows[0]]
    trackers = header[1:]
    if not trackers:
        raise ValueError("baseline table has no tracker columns")
    vids, vals = [], []
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise ValueError(f"baseline table line {lineno}: {len(r)} fields, expected {len(header)}")
        vids.append(r[0].strip())
        try:
            vals.append([float(c) for c in r[1:]])
        except ValueError:
            raise ValueError(f"baseline table line {lineno}: non-numeric entry") from None
    return BaselineSRTable(vids, trackers, np.asarray(vals, dtype=np.float64).T.reshape(len(trackers), len(vids)))


def video_difficulty(baseline_sr: np.ndarray) -> np.ndarray:
    """One minus the mean baseline SR per video; ``baseline_sr`` is (T, N)."""
    return 1.0 - np.asarray(baseline_sr, dtype=np.float64).mean(axis=0)


def boc(eval_sr: Sequence[float], baselines: BaselineSRTable | np.ndarray) -> float:
    """BreakOut Capability x 100: mean over videos of SR times video difficulty.

    ``eval_sr`` holds per-video SR fractions in the same video order as the
    (T, N) baseline matrix.
    """
    x = np.asarray(eval_sr, dtype=np.float64)
    base = baselines.sr if isinstance(baselines, BaselineSRTable) else np.asarray(baselines, dtype=np.float64)
    if base.ndim != 2 or x.ndim != 1 or base.shape[1] != x.size:
        raise ValueError(f"eval SR has {x.size} videos, baseline table shape {base.shape}")
    if x.size == 0:
        raise ValueError("BOC needs at least one video")
    return float(np.mean(x * video_difficulty(base)) * 100.0)


# --- reports ---------------------------------------------------------------


@dataclass
class MetricReport:
    overall: Curves
    per_video: dict[str, Curves]
    attributes: dict[str, Curves | None]
    boc: float | None = None
    excluded: list[str] = field(default_factory=list)
    notices: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "thresholds": {
                "success_iou": SUCCESS_THRESHOLDS.tolist(),
                "precision_px": PRECISION_THRESHOLDS.tolist(),
                "norm_precision": NORM_PRECISION_THRESHOLDS.tolist(),
                "precision_at_px": PRECISION_AT,
            },
            "overall": self.overall.to_json(),
            "BOC": self.boc,
            "per_video": {k: v.to_json() for k, v in self.per_video.items()},
            "attributes": {k: (v.to_json() if v is not None else None) for k, v in self.attributes.items()},
            "excluded_videos": self.excluded,
            "notices": self.notices,
        }

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "name", "curve", "threshold", "value"])
        scoped = [("overall", "all", self.overall)]
        scoped += [("video", k, v) for k, v in self.per_video.items()]
        scoped += [("attribute", k, v) for k, v in self.attributes.items() if v is not None]
        for scope, name, c in scoped:
            for curve, th, vals in (("success", SUCCESS_THRESHOLDS, c.success),
                                    ("precision", PRECISION_THRESHOLDS, c.precision),
                                    ("norm_precision", NORM_PRECISION_THRESHOLDS, c.norm_precision)):
                for t, v in zip(th.tolist(), vals.tolist()):
                    w.writerow([scope, name, curve, repr(t), repr(v)])
        return buf.getvalue()


def aggregate(results: Iterable[VideoResult], baselines: BaselineSRTable | None = None) -> MetricReport:
    results = list(results)
    if not results:
        raise ValueError("aggregate needs at least one video")
    per_video: dict[str, Curves] = {}
    excluded = []
    for r in results:
        c = video_curves(r)
        if c is None:
            excluded.append(r.video_id)
        else:
            per_video[r.video_id] = c
    if not per_video:
        raise ValueError("every video is fully absent; nothing to evaluate")

    tags = list(ATTRIBUTES) + sorted({t for r in results for t in r.attributes} - set(ATTRIBUTES))
    attrs: dict[str, Curves | None] = {}
    for tag in tags:
        sub = [per_video[r.video_id] for r in results if tag in r.attributes and r.video_id in per_video]
        attrs[tag] = mean_curves(sub) if sub else None

    notices = []
    boc_value = None
    if baselines is None:
        notices.append("no baseline SR table supplied; BOC omitted")
    else:
        ids = list(per_video)
        extra = set(baselines.video_ids) - set(ids)
        if extra:
            notices.append(f"{len(extra)} baseline-table videos not evaluated were ignored for BOC")
        table = baselines.subset(ids)
        boc_value = boc([per_video[v].success.mean() for v in ids], table)
    return MetricReport(mean_curves(list(per_video.values())), per_video, attrs, boc_value, excluded, notices)
