"""Dense image-like event renderings, early fusion and PNM image files.

Images are float arrays of shape ``(h, w, channels)``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .event_io import EventWindow
from .voxel import Region

FUSION_RATIO = 0.2


def polarity_counts(window: EventWindow, w: int, h: int) -> np.ndarray:
    """Per-pixel event counts, shape ``(h, w, 2)``: positive then negative."""
    ev = window.events
    out = np.zeros((h, w, 2), dtype=np.int64)
    chan = (ev["p"] < 0).astype(np.intp)
    np.add.at(out, (ev["y"].astype(np.intp), ev["x"].astype(np.intp), chan), 1)
    return out


def render_event_frame(window: EventWindow, w: int, h: int) -> np.ndarray:
    """Stack a window into a 3-channel image: red = positive, blue = negative.

    Counts are scaled by ``255 / c_max`` with ``c_max`` the largest count of
    any pixel/polarity in the window.
    """
    counts = polarity_counts(window, w, h)
    c_max = max(int(counts.max(initial=0)), 1)
    img = np.zeros((h, w, 3))
    img[..., 0] = counts[..., 0]
    img[..., 2] = counts[..., 1]
    return np.clip(img * (255.0 / c_max), 0.0, 255.0)


def render_time_surface(window: EventWindow, w: int, h: int, decay_tau: float | None = None) -> np.ndarray:
    """Exponentially decayed time of the latest event per pixel and polarity.

    Value ``exp(-(t_end - t_last) / decay_tau)``, 0 where nothing fired.
    ``decay_tau`` defaults to half the window duration.
    """
    if decay_tau is None:
        decay_tau = window.duration / 2.0
    if not decay_tau > 0:
        raise ValueError(f"decay_tau must be positive, got {decay_tau}")
    ev = window.events
    last = np.full((h, w, 2), -1, dtype=np.int64)
    chan = (ev["p"] < 0).astype(np.intp)
    np.maximum.at(last, (ev["y"].astype(np.intp), ev["x"].astype(np.intp), chan), ev["t"].astype(np.int64))
    seen = last >= 0
    out = np.zeros((h, w, 2))
    out[seen] = np.exp(-(window.t_end - last[seen]).astype(np.float64) / decay_tau)
    return out


def blend_early_fusion(color: np.ndarray, event_frame: np.ndarray, ratio: float = FUSION_RATIO) -> np.ndarray:
    """``(ratio * event + color) / (1 + ratio)``, clipped to [0, 255]."""
    color = np.asarray(color, dtype=np.float64)
    event_frame = np.asarray(event_frame, dtype=np.float64)
    if color.shape != event_frame.shape or color.ndim != 3 or color.shape[2] != 3:
        raise ValueError(f"blend needs matching (h, w, 3) images, got {color.shape} and {event_frame.shape}")
    return np.clip((ratio * event_frame + color) / (1.0 + ratio), 0.0, 255.0)


def to_rgb(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return np.repeat(frame[..., None], 3, axis=2)
    return frame


def crop_resize(img: np.ndarray, region: Region, size: int) -> np.ndarray:
    """Bilinear resample of ``region`` to ``size x size``; zeros outside the image."""
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    step_x, step_y = region.side_w / size, region.side_h / size
    sx = region.left + (np.arange(size) + 0.5) * step_x - 0.5
    sy = region.top + (np.arange(size) + 0.5) * step_y - 0.5
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)[None, :, None]
    fy = (sy - y0)[:, None, None]

    padded = np.zeros((h + 2, w + 2, img.shape[2]))
    padded[1:-1, 1:-1] = img
    xi0 = np.clip(x0 + 1, 0, w + 1)
    xi1 = np.clip(x0 + 2, 0, w + 1)
    yi0 = np.clip(y0 + 1, 0, h + 1)
    yi1 = np.clip(y0 + 2, 0, h + 1)
    # indices pushed past the border land on the zero padding
    top = padded[yi0][:, xi0] * (1 - fx) + padded[yi0][:, xi1] * fx
    bot = padded[yi1][:, xi0] * (1 - fx) + padded[yi1][:, xi1] * fx
    out = top * (1 - fy) + bot * fy
    return out[..., 0] if squeeze else out


# --- PNM -------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def write_pnm(path: str | Path, img: np.ndarray) -> None:
    """PGM for 1-channel images, PPM for 3-channel. Values rounded to 8 bits."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    h, w = img.shape[:2]
    data = img if img.dtype == np.uint8 else to_uint8(img)
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + data.tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM {magic!r} maxval {maxval}")
    ch = 1 if magic == b"P5" else 3
    arr = np.frombuffer(raw, dtype=np.uint8, count=w * h * ch, offset=pos)
    return arr.reshape(h, w) if ch == 1 else arr.reshape(h, w, 3)


def time_surface_to_rgb(surface: np.ndarray) -> np.ndarray:
    """Positive channel to red, negative to blue, scaled to [0, 255]."""
    h, w = surface.shape[:2]
    out = np.zeros((h, w, 3))
    out[..., 0] = surface[..., 0] * 255.0
    out[..., 2] = surface[..., 1] * 255.0
    return out
