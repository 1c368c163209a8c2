"""Frame-by-frame inference: fixed template, search crop around the last box."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .boxes import BBox
from .event_io import EventWindow, frame_windows
from .model import (
    ModelParams, decode_box, project_frame_tokens, project_voxel_tokens, run_layers,
    tracking_head, unify,
)
from .represent import crop_resize, to_rgb
from .voxel import GridSpec, VoxelSet, crop_region, filter_voxels, select_top_k, voxelize

MIN_BOX_SIDE = 1.0


@dataclass(frozen=True)
class TrackerSettings:
    grid_m: int = 34
    grid_n: int = 26
    grid_tau: int = 20
    template_factor: float = 2.0
    search_factor: float = 4.0


def voxelize_windows(windows: Sequence[EventWindow], settings: TrackerSettings, threads: int = 1) -> list[VoxelSet]:
    """Voxelize each window on the full sensor; output order matches input regardless of ``threads``."""
    def one(w: EventWindow) -> VoxelSet:
        return voxelize(w, GridSpec.for_window(w, settings.grid_m, settings.grid_n, settings.grid_tau))

    if threads <= 1 or len(windows) < 2:
        return [one(w) for w in windows]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, windows))


def _sane(box: BBox) -> BBox:
    w, h = max(box.w, MIN_BOX_SIDE), max(box.h, MIN_BOX_SIDE)
    return BBox.from_center(box.cx, box.cy, w, h)


def track_sequence(frames: Sequence[np.ndarray], events: np.ndarray, frame_times: Sequence[int],
                   init_box: BBox, params: ModelParams, settings: TrackerSettings | None = None,
                   threads: int = 1) -> list[BBox]:
    """Track a target through a color-event sequence.

    Frame 0 fixes the template: a 2x color crop and the top-1024 voxels of
    the first inter-frame window inside it. Frame ``r`` searches a 4x crop
    around the previous prediction using the top-4096 voxels of the events
    between frames ``r - 1`` and ``r``. The template is never updated.
    """
    settings = settings or TrackerSettings()
    init_box = BBox(*(float(v) for v in init_box))
    n = len(frames)
    if n <= 1:
        return [init_box]
    if len(frame_times) != n:
        raise ValueError(f"{n} frames but {len(frame_times)} timestamps")
    cfg = params.config
    h, w = np.asarray(frames[0]).shape[:2]
    sensor = (w, h)

    windows = frame_windows(events, frame_times, w, h)
    voxel_sets = voxelize_windows(windows, settings, threads)

    # one BLAS thread keeps every matmul's reduction order fixed
    with threadpool_limits(limits=1, user_api="blas"):
        region_z = crop_region(init_box, settings.template_factor, sensor)
        zf = crop_resize(to_rgb(frames[0]), region_z, cfg.template_px)
        zv = select_top_k(filter_voxels(voxel_sets[0], region_z), cfg.template_topk)
        ffz = project_frame_tokens(zf, params, "z")
        fvz = project_voxel_tokens(zv, params, "z")

        boxes = [init_box]
        prev = init_box
        for r in range(1, n):
            region_x = crop_region(prev, settings.search_factor, sensor)
            xf = crop_resize(to_rgb(frames[r]), region_x, cfg.search_px)
            xv = select_top_k(filter_voxels(voxel_sets[r - 1], region_x), cfg.search_topk)
            u = unify(ffz, project_frame_tokens(xf, params, "x"), fvz,
                      project_voxel_tokens(xv, params, "x"), params["pos.z"], params["pos.x"])
            head = tracking_head(run_layers(u, params), params)
            prev = _sane(decode_box(head, region_x))
            boxes.append(prev)
    return boxes
