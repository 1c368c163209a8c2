"""Sparse event voxelization, region cropping and top-k voxel selection.

A window of events is binned into an ``m x n x tau`` grid over (x, y, t).
Every occupied cell becomes a 19-wide row: the normalized cell center
(3 values) followed by 16 within-cell statistics (see :data:`FEATURE_NAMES`).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .boxes import BBox
from .event_io import EventWindow

N_FEATURES = 16
ROW_WIDTH = 3 + N_FEATURES
SEARCH_TOPK = 4096
TEMPLATE_TOPK = 1024

FEATURE_NAMES = (
    "log_count", "pos_frac", "neg_frac", "mean_pol",
    "mean_x", "mean_y", "mean_t",
    "std_x", "std_y", "std_t",
    "first_t", "last_t", "extent_t",
    "cov_xy", "cov_xt", "cov_yt",
)


@dataclass(frozen=True)
class GridSpec:
    sensor_w: int
    sensor_h: int
    t_start: int
    t_end: int
    m: int = 34
    n: int = 26
    tau: int = 20

    def __post_init__(self):
        if min(self.m, self.n, self.tau) < 1:
            raise ValueError(f"grid dimensions must be >= 1, got {self.m}x{self.n}x{self.tau}")
        if self.t_end <= self.t_start:
            raise ValueError(f"empty time span [{self.t_start}, {self.t_end})")

    @classmethod
    def for_window(cls, window: EventWindow, m: int = 34, n: int = 26, tau: int = 20) -> "GridSpec":
        return cls(window.sensor_w, window.sensor_h, window.t_start, window.t_end, m, n, tau)

    @property
    def n_cells(self) -> int:
        return self.m * self.n * self.tau

    @property
    def duration(self) -> int:
        return self.t_end - self.t_start

    def cell_bounds(self, ix: int, iy: int, iz: int) -> "CellBounds":
        cw, ch, ct = self.sensor_w / self.m, self.sensor_h / self.n, self.duration / self.tau
        return CellBounds(ix * cw, (ix + 1) * cw, iy * ch, (iy + 1) * ch,
                          self.t_start + iz * ct, self.t_start + (iz + 1) * ct)


class CellBounds(NamedTuple):
    x0: float
    x1: float
    y0: float
    y1: float
    t0: float
    t1: float


@dataclass(frozen=True)
class Region:
    """Axis-aligned crop in sensor pixels, given by center and side lengths."""

    cx: float
    cy: float
    side_w: float
    side_h: float

    def __post_init__(self):
        if not (self.side_w > 0 and self.side_h > 0):
            raise ValueError(f"region sides must be positive, got {self.side_w}x{self.side_h}")

    @property
    def left(self) -> float:
        return self.cx - self.side_w / 2.0

    @property
    def top(self) -> float:
        return self.cy - self.side_h / 2.0

    @property
    def right(self) -> float:
        return self.cx + self.side_w / 2.0

    @property
    def bottom(self) -> float:
        return self.cy + self.side_h / 2.0

    def contains(self, px, py):
        """Half-open membership test; works elementwise on arrays."""
        return (px >= self.left) & (px < self.right) & (py >= self.top) & (py < self.bottom)

    @classmethod
    def full_sensor(cls, sensor_w: int, sensor_h: int) -> "Region":
        return cls(sensor_w / 2.0, sensor_h / 2.0, float(sensor_w), float(sensor_h))


@dataclass
class Voxel:
    cx: float
    cy: float
    cz: float
    feat: np.ndarray
    count: int


@dataclass
class VoxelSet:
    """Occupied cells of one window, ordered by (iz, iy, ix).

    ``coords`` are normalized against ``frame``: the full sensor straight
    out of :func:`voxelize`, the crop region after :func:`filter_voxels`.
    """

    cells: np.ndarray  # (n, 3) int64: ix, iy, iz
    coords: np.ndarray  # (n, 3) float64
    feats: np.ndarray  # (n, 16) float64
    counts: np.ndarray  # (n,) int64
    spec: GridSpec
    frame: Region

    def __len__(self) -> int:
        return int(self.counts.size)

    def __getitem__(self, cell: tuple[int, int, int]) -> Voxel:
        hit = np.flatnonzero((self.cells == np.asarray(cell)).all(axis=1))
        if hit.size == 0:
            raise KeyError(cell)
        i = int(hit[0])
        return Voxel(*self.coords[i], feat=self.feats[i].copy(), count=int(self.counts[i]))

    def as_dict(self) -> dict[tuple[int, int, int], Voxel]:
        return {tuple(int(v) for v in c): self[tuple(c)] for c in self.cells}

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        f = self.frame
        return f.left + self.coords[:, 0] * f.side_w, f.top + self.coords[:, 1] * f.side_h

    def rows(self) -> np.ndarray:
        return np.hstack([self.coords, self.feats]) if len(self) else np.zeros((0, ROW_WIDTH))

    def take(self, idx: np.ndarray) -> "VoxelSet":
        return replace(self, cells=self.cells[idx], coords=self.coords[idx],
                       feats=self.feats[idx], counts=self.counts[idx])


def _empty_set(spec: GridSpec) -> VoxelSet:
    return VoxelSet(np.zeros((0, 3), np.int64), np.zeros((0, 3)), np.zeros((0, N_FEATURES)),
                    np.zeros(0, np.int64), spec, Region.full_sensor(spec.sensor_w, spec.sensor_h))


def _grouped_features(ox, oy, ot, pol, starts, counts, n_window) -> np.ndarray:
    """16 statistics per contiguous group of events (groups given by ``starts``)."""
    cnt = counts.astype(np.float64)
    rep = np.repeat(np.arange(counts.size), counts)

    def gmean(v):
        return np.add.reduceat(v, starts) / cnt

    pos = np.add.reduceat((pol > 0).astype(np.float64), starts) / cnt
    neg = 1.0 - pos
    mx, my, mt = gmean(ox), gmean(oy), gmean(ot)
    dx, dy, dt = ox - mx[rep], oy - my[rep], ot - mt[rep]
    feats = np.empty((counts.size, N_FEATURES))
    feats[:, 0] = np.log1p(cnt) / np.log1p(n_window)
    feats[:, 1] = pos
    feats[:, 2] = neg
    feats[:, 3] = pos - neg
    feats[:, 4] = mx
    feats[:, 5] = my
    feats[:, 6] = mt
    feats[:, 7] = np.sqrt(gmean(dx * dx))
    feats[:, 8] = np.sqrt(gmean(dy * dy))
    feats[:, 9] = np.sqrt(gmean(dt * dt))
    feats[:, 10] = np.minimum.reduceat(ot, starts)
    feats[:, 11] = np.maximum.reduceat(ot, starts)
    feats[:, 12] = feats[:, 11] - feats[:, 10]
    feats[:, 13] = gmean(dx * dy)
    feats[:, 14] = gmean(dx * dt)
    feats[:, 15] = gmean(dy * dt)
    return feats


def voxel_features(cell_events: np.ndarray, bounds: CellBounds, n_window: int | None = None) -> np.ndarray:
    """The 16 statistics of one occupied cell.

    Offsets are normalized to ``[0, 1)`` within ``bounds``; ``n_window``
    (defaults to the cell's own count) scales the log-count term.
    """
    if cell_events.size == 0:
        raise ValueError("voxel_features needs at least one event")
    b = bounds
    ox = (cell_events["x"].astype(np.float64) - b.x0) / (b.x1 - b.x0)
    oy = (cell_events["y"].astype(np.float64) - b.y0) / (b.y1 - b.y0)
    ot = (cell_events["t"].astype(np.float64) - b.t0) / (b.t1 - b.t0)
    for name, o in (("x", ox), ("y", oy), ("t", ot)):
        if (o < 0).any() or (o > 1).any():
            raise ValueError(f"event {name} outside cell bounds {bounds}")
    n = cell_events.size
    return _grouped_features(ox, oy, ot, cell_events["p"], np.array([0]), np.array([n]),
                             n if n_window is None else n_window)[0]


def cell_indices(window: EventWindow, spec: GridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ev = window.events
    x = ev["x"].astype(np.int64)
    y = ev["y"].astype(np.int64)
    t = (ev["t"] - np.uint64(spec.t_start)).astype(np.int64) if ev.size else np.zeros(0, np.int64)
    ix = np.minimum(x * spec.m // spec.sensor_w, spec.m - 1)
    iy = np.minimum(y * spec.n // spec.sensor_h, spec.n - 1)
    iz = np.minimum(t * spec.tau // spec.duration, spec.tau - 1)
    return ix, iy, iz


def voxelize(window: EventWindow, spec: GridSpec | None = None) -> VoxelSet:
    """Bin a window into occupied voxels with their 19-wide descriptors."""
    if spec is None:
        spec = GridSpec.for_window(window)
    ev = window.events
    if ev.size == 0:
        return _empty_set(spec)
    if (ev["t"] < spec.t_start).any() or (ev["t"] >= spec.t_end).any():
        raise ValueError(f"events outside grid time span [{spec.t_start}, {spec.t_end})")
    if (ev["x"] >= spec.sensor_w).any() or (ev["y"] >= spec.sensor_h).any():
        raise ValueError("events outside grid sensor bounds")

    ix, iy, iz = cell_indices(window, spec)
    flat = ix + spec.m * (iy + spec.n * iz)
    # stable sort keeps timestamp order inside a cell
    order = np.argsort(flat, kind="stable")
    flat_s = flat[order]
    uniq, starts, counts = np.unique(flat_s, return_index=True, return_counts=True)

    cx = uniq % spec.m
    cy = (uniq // spec.m) % spec.n
    cz = uniq // (spec.m * spec.n)
    cw, ch, ct = spec.sensor_w / spec.m, spec.sensor_h / spec.n, spec.duration / spec.tau
    s = ev[order]
    ex, ey, ez = ix[order], iy[order], iz[order]
    ox = (s["x"].astype(np.float64) - ex * cw) / cw
    oy = (s["y"].astype(np.float64) - ey * ch) / ch
    ot = ((s["t"] - np.uint64(spec.t_start)).astype(np.float64) - ez * ct) / ct
    feats = _grouped_features(ox, oy, ot, s["p"], starts, counts, ev.size)

    cells = np.stack([cx, cy, cz], axis=1)
    coords = (cells + 0.5) / np.array([spec.m, spec.n, spec.tau], dtype=np.float64)
    return VoxelSet(cells, coords, feats, counts.astype(np.int64), spec,
                    Region.full_sensor(spec.sensor_w, spec.sensor_h))


def crop_region(target: BBox, factor: float, sensor: tuple[int, int] | None = None) -> Region:
    """Crop centered on ``target`` with sides ``factor`` times the box.

    With a sensor size, the region is shifted (never shrunk) to lie inside
    it. An axis longer than the sensor is centered on the sensor instead.
    """
    if not (target.w > 0 and target.h > 0):
        raise ValueError(f"degenerate target box {target}")
    sw, sh = factor * target.w, factor * target.h
    cx, cy = target.x + target.w / 2.0, target.y + target.h / 2.0
    if sensor is not None:
        cx = _clamp_center(cx, sw, sensor[0])
        cy = _clamp_center(cy, sh, sensor[1])
    return Region(cx, cy, sw, sh)


def _clamp_center(c: float, side: float, limit: float) -> float:
    if side >= limit:
        return limit / 2.0
    return min(max(c, side / 2.0), limit - side / 2.0)


def filter_voxels(voxels: VoxelSet, region: Region) -> VoxelSet:
    """Keep voxels whose center falls in ``region``; re-normalize x/y to the region."""
    px, py = voxels.pixel_centers()
    keep = np.flatnonzero(region.contains(px, py))
    out = voxels.take(keep)
    coords = out.coords.copy()
    coords[:, 0] = (px[keep] - region.left) / region.side_w
    coords[:, 1] = (py[keep] - region.top) / region.side_h
    return replace(out, coords=coords, frame=region)


def filter_events(window: EventWindow, region: Region) -> EventWindow:
    ev = window.events
    keep = region.contains(ev["x"].astype(np.float64), ev["y"].astype(np.float64))
    return replace(window, events=ev[keep])


@dataclass
class VoxelTensor:
    """Fixed-capacity input: the top-``k`` voxels by count, then zero rows."""

    voxels: VoxelSet  # occupied prefix, already in output order
    k: int

    @property
    def n_occupied(self) -> int:
        return len(self.voxels)

    @property
    def data(self) -> np.ndarray:
        out = np.zeros((self.k, ROW_WIDTH))
        out[: self.n_occupied] = self.voxels.rows()
        return out

    @property
    def counts(self) -> np.ndarray:
        out = np.zeros(self.k, np.int64)
        out[: self.n_occupied] = self.voxels.counts
        return out

    def to_bytes(self) -> bytes:
        return struct.pack("<II", self.k, self.n_occupied) + self.data.astype("<f4").tobytes()


def read_voxel_tensor(data: bytes) -> tuple[int, int, np.ndarray]:
    """Inverse of :meth:`VoxelTensor.to_bytes`: ``(k, n_occupied, rows)``."""
    k, occ = struct.unpack_from("<II", data)
    rows = np.frombuffer(data, dtype="<f4", offset=8)
    if rows.size != k * ROW_WIDTH:
        raise ValueError(f"voxel tensor payload has {rows.size} floats, expected {k * ROW_WIDTH}")
    return k, occ, rows.reshape(k, ROW_WIDTH).astype(np.float32)


def select_top_k(voxels: VoxelSet | VoxelTensor, k: int) -> VoxelTensor:
    """Densest ``k`` voxels, count-descending, ties by (iz, iy, ix)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if isinstance(voxels, VoxelTensor):
        voxels = voxels.voxels
    c = voxels.cells
    order = np.lexsort((c[:, 0], c[:, 1], c[:, 2], -voxels.counts))[:k]
    return VoxelTensor(voxels.take(order), k)
