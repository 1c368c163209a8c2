"""Axis-aligned boxes in pixel (x, y, w, h) form, top-left origin."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np


class BBox(NamedTuple):
    x: float
    y: float
    w: float
    h: float

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x + dx, self.y + dy, self.w, self.h)


@dataclass(frozen=True)
class TrackAnnotation:
    frame_idx: int
    box: BBox
    absent: bool = False


def boxes_to_array(boxes: Iterable[BBox]) -> np.ndarray:
    arr = np.asarray([tuple(b) for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)
