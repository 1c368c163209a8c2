"""Event streams, annotation files and synthetic color-event sequences.

Events are held as numpy structured arrays of :data:`EVENT_DTYPE`. The dtype
doubles as the on-disk binary record (16 bytes, little-endian), so binary
parsing is a zero-copy ``frombuffer``.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .boxes import BBox, TrackAnnotation

log = logging.getLogger(__name__)

EVENT_DTYPE = np.dtype(
    {
        "names": ["t", "x", "y", "p"],
        "formats": ["<u8", "<u2", "<u2", "i1"],
        "offsets": [0, 8, 10, 12],
        "itemsize": 16,
    }
)
BINARY_MAGIC = b"EVT1"
_HEADER = struct.Struct("<4sHHQ")

# Seventeen challenge tags. The first ten are named for this benchmark; the
# rest follow the attribute set of the dataset it was modelled on.
ATTRIBUTES = (
    "FOC", "VC", "ROT", "FM", "POC", "LI", "SV", "BOM", "MB", "OE",
    "CM", "DEF", "OV", "BC", "ARC", "NM", "IV",
)


class EventParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class EventValidationError(ValueError):
    pass


class AnnotationParseError(ValueError):
    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class EventPoint(NamedTuple):
    t: int
    x: int
    y: int
    p: int


def make_events(t, x, y, p) -> np.ndarray:
    """Build an event array from column sequences. Padding bytes are zeroed."""
    t = np.asarray(t)
    out = np.zeros(t.shape[0], dtype=EVENT_DTYPE)
    out["t"] = t
    out["x"] = x
    out["y"] = y
    out["p"] = p
    return out


def events_from_points(points: Iterable[EventPoint]) -> np.ndarray:
    pts = list(points)
    if not pts:
        return np.zeros(0, dtype=EVENT_DTYPE)
    t, x, y, p = zip(*pts)
    return make_events(t, x, y, p)


def to_points(events: np.ndarray) -> list[EventPoint]:
    return [EventPoint(int(e["t"]), int(e["x"]), int(e["y"]), int(e["p"])) for e in events]


def validate_events(events: np.ndarray, sensor_w: int, sensor_h: int) -> None:
    if events.size == 0:
        return
    bad = (events["x"] >= sensor_w) | (events["y"] >= sensor_h)
    if bad.any():
        i = int(np.argmax(bad))
        raise EventValidationError(
            f"event {i} at ({events['x'][i]}, {events['y'][i]}) outside {sensor_w}x{sensor_h} sensor"
        )
    badp = (events["p"] != 1) & (events["p"] != -1)
    if badp.any():
        i = int(np.argmax(badp))
        raise EventValidationError(f"event {i} has polarity {events['p'][i]}")


# --- parsing ---------------------------------------------------------------


def _parse_csv_slow(text: bytes) -> np.ndarray:
    """Line-by-line parse; locates the offending byte offset on error."""
    ts, xs, ys, ps = [], [], [], []
    offset = 0
    first = True
    for raw in text.splitlines(keepends=True):
        line = raw.strip()
        start = offset
        offset += len(raw)
        if not line or line.startswith(b"#"):
            continue
        fields = line.split(b",")
        if first:
            first = False
            if fields and not fields[0].strip().lstrip(b"-").isdigit():
                continue  # header
        if len(fields) != 4:
            raise EventParseError(f"expected 4 fields, got {len(fields)}", start)
        try:
            t, x, y, p = (int(f) for f in fields)
        except ValueError:
            raise EventParseError(f"non-integer field in {line!r}", start) from None
        if t < 0 or x < 0 or y < 0 or x > 0xFFFF or y > 0xFFFF:
            raise EventParseError(f"field out of range in {line!r}", start)
        if p not in (-1, 0, 1):
            raise EventParseError(f"polarity {p} not in {{-1, 0, 1}}", start)
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(-1 if p == 0 else p)
    return make_events(np.asarray(ts, dtype=np.uint64), xs, ys, ps)


def _parse_csv(data: bytes) -> np.ndarray:
    body = data
    stripped = data.lstrip()
    if stripped[:1].isalpha():
        nl = data.find(b"\n")
        body = b"" if nl < 0 else data[nl + 1:]
    if not body.strip():
        return np.zeros(0, dtype=EVENT_DTYPE)
    try:
        cols = np.loadtxt(io.BytesIO(body), delimiter=",", dtype=np.int64, ndmin=2, comments="#")
    except ValueError:
        return _parse_csv_slow(data)
    if cols.shape[1] != 4 or (cols < 0)[:, :3].any() or (cols[:, 1:3] > 0xFFFF).any():
        return _parse_csv_slow(data)
    p = cols[:, 3]
    if not np.isin(p, (-1, 0, 1)).all():
        return _parse_csv_slow(data)
    return make_events(cols[:, 0].astype(np.uint64), cols[:, 1], cols[:, 2], np.where(p == 0, -1, p))


def binary_header(data: bytes) -> tuple[int, int, int]:
    """Return ``(sensor_w, sensor_h, count)`` from a binary event file."""
    if len(data) < _HEADER.size:
        raise EventParseError("truncated header", len(data))
    magic, w, h, n = _HEADER.unpack_from(data)
    if magic != BINARY_MAGIC:
        raise EventParseError(f"bad magic {magic!r}", 0)
    return w, h, n


def _parse_binary(data: bytes) -> np.ndarray:
    w, h, n = binary_header(data)
    need = _HEADER.size + n * EVENT_DTYPE.itemsize
    if len(data) < need:
        whole = (len(data) - _HEADER.size) // EVENT_DTYPE.itemsize
        raise EventParseError(
            f"truncated record {whole} of {n}", _HEADER.size + whole * EVENT_DTYPE.itemsize
        )
    if len(data) > need:
        raise EventParseError(f"{len(data) - need} trailing bytes after {n} records", need)
    # copy the raw bytes first: ndarray.copy() on a padded dtype leaves the
    # padding uninitialized, which would break byte-exact round trips
    body = bytearray(data[_HEADER.size:need])
    events = np.frombuffer(body, dtype=EVENT_DTYPE, count=n)
    badp = (events["p"] != 1) & (events["p"] != -1)
    if badp.any():
        i = int(np.argmax(badp))
        raise EventParseError(f"record {i} has polarity {events['p'][i]}", _HEADER.size + i * 16)
    validate_events(events, w, h)
    return events


def parse_events(data: bytes, fmt: str = "csv", sensor: tuple[int, int] | None = None) -> np.ndarray:
    """Parse an event stream.

    ``fmt`` is ``"csv"`` (lines ``t,x,y,p``, optional header, polarity 0
    read as -1) or ``"binary"``. Binary files carry their own resolution and
    are always validated against it; CSV input is validated only when
    ``sensor=(w, h)`` is given. Events come back in file order.
    """
    if fmt == "binary":
        events = _parse_binary(data)
    elif fmt == "csv":
        events = _parse_csv(data)
    else:
        raise ValueError(f"unknown event format {fmt!r}")
    if sensor is not None:
        validate_events(events, *sensor)
    return events


def serialize_events(events: np.ndarray, fmt: str = "binary", sensor: tuple[int, int] = (346, 260)) -> bytes:
    if fmt == "binary":
        clean = make_events(events["t"], events["x"], events["y"], events["p"])
        return _HEADER.pack(BINARY_MAGIC, sensor[0], sensor[1], clean.size) + clean.tobytes()
    if fmt == "csv":
        lines = [f"{t},{x},{y},{p}\n" for t, x, y, p in zip(
            events["t"].tolist(), events["x"].tolist(), events["y"].tolist(), events["p"].tolist()
        )]
        return "".join(lines).encode()
    raise ValueError(f"unknown event format {fmt!r}")


def format_from_path(path: str | Path) -> str:
    return "csv" if str(path).lower().endswith((".csv", ".txt")) else "binary"


def load_events(path: str | Path) -> tuple[np.ndarray, tuple[int, int] | None]:
    """Read an event file; the resolution is ``None`` for CSV input."""
    data = Path(path).read_bytes()
    fmt = format_from_path(path)
    events = parse_events(data, fmt)
    sensor = binary_header(data)[:2] if fmt == "binary" else None
    return events, sensor


def save_events(path: str | Path, events: np.ndarray, sensor: tuple[int, int]) -> None:
    Path(path).write_bytes(serialize_events(events, format_from_path(path), sensor))


# --- windows ---------------------------------------------------------------


@dataclass
class EventWindow:
    events: np.ndarray
    t_start: int
    t_end: int
    sensor_w: int
    sensor_h: int

    def __len__(self) -> int:
        return int(self.events.size)

    @property
    def duration(self) -> int:
        return self.t_end - self.t_start


def is_sorted(events: np.ndarray) -> bool:
    t = events["t"]
    return bool(t.size < 2 or (t[1:] >= t[:-1]).all())


def slice_window(events: np.ndarray, t0: int, t1: int, sensor_w: int = 346, sensor_h: int = 260) -> EventWindow:
    """Events with ``t0 <= t < t1``, order preserved."""
    if not t0 < t1:
        raise ValueError(f"empty interval [{t0}, {t1})")
    if not is_sorted(events):
        raise ValueError("events are not sorted by timestamp")
    t = events["t"]
    lo = int(np.searchsorted(t, np.uint64(t0), side="left"))
    hi = int(np.searchsorted(t, np.uint64(t1), side="left"))
    return EventWindow(events[lo:hi], int(t0), int(t1), sensor_w, sensor_h)


def frame_windows(events: np.ndarray, frame_times: Sequence[int], sensor_w: int, sensor_h: int) -> list[EventWindow]:
    """Windows between consecutive frame timestamps; ``len(frame_times) - 1`` of them."""
    return [
        slice_window(events, frame_times[r - 1], frame_times[r], sensor_w, sensor_h)
        for r in range(1, len(frame_times))
    ]


# --- annotations -----------------------------------------------------------


def _fmt_num(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def _split_fields(line: str) -> list[str]:
    return line.replace("\t", ",").replace(" ", ",").split(",") if "," not in line else line.split(",")


def _content_lines(text: str) -> list[str]:
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    return lines


def _floats(fields: list[str], lineno: int) -> list[float]:
    try:
        return [float(f) for f in fields]
    except ValueError:
        raise AnnotationParseError(f"non-numeric field in {','.join(fields)!r}", lineno) from None


def parse_annotations(text: str) -> list[TrackAnnotation]:
    """Ground truth, one ``x,y,w,h,absent`` line per frame."""
    out = []
    for i, line in enumerate(_content_lines(text)):
        fields = [f for f in _split_fields(line.strip()) if f != ""]
        if len(fields) != 5:
            raise AnnotationParseError(f"expected 5 fields, got {len(fields)}", i + 1)
        x, y, w, h, a = _floats(fields, i + 1)
        if a not in (0.0, 1.0):
            raise AnnotationParseError(f"absent flag must be 0 or 1, got {fields[4]}", i + 1)
        absent = a == 1.0
        if not absent and (w < 0 or h < 0):
            raise AnnotationParseError("negative width/height on a visible frame", i + 1)
        out.append(TrackAnnotation(i, BBox(x, y, w, h), absent))
    return out


def parse_results(text: str) -> list[BBox]:
    out = []
    for i, line in enumerate(_content_lines(text)):
        fields = [f for f in _split_fields(line.strip()) if f != ""]
        if len(fields) != 4:
            raise AnnotationParseError(f"expected 4 fields, got {len(fields)}", i + 1)
        out.append(BBox(*_floats(fields, i + 1)))
    return out


def format_annotations(annotations: Iterable[TrackAnnotation]) -> str:
    return "".join(
        ",".join(_fmt_num(v) for v in a.box) + f",{int(a.absent)}\n" for a in annotations
    )


def format_results(boxes: Iterable[BBox]) -> str:
    return "".join(",".join(_fmt_num(v) for v in b) + "\n" for b in boxes)


def parse_attributes(text: str) -> dict[str, frozenset[str]]:
    """``video_id,TAG1|TAG2|...`` per line. Unknown tags are kept with a warning."""
    out: dict[str, frozenset[str]] = {}
    for i, line in enumerate(_content_lines(text)):
        line = line.strip()
        if not line:
            raise AnnotationParseError("blank line", i + 1)
        vid, _, tags = line.partition(",")
        tagset = frozenset(t.strip() for t in tags.split("|") if t.strip())
        unknown = tagset.difference(ATTRIBUTES)
        if unknown:
            log.warning("video %s: unknown attribute tags %s", vid, sorted(unknown))
        out[vid.strip()] = tagset
    return out


def format_attributes(attrs: dict[str, Iterable[str]]) -> str:
    return "".join(f"{vid},{'|'.join(sorted(tags))}\n" for vid, tags in attrs.items())


# --- synthetic sequences ---------------------------------------------------


@dataclass(frozen=True)
class SyntheticSceneConfig:
    """A bright rectangle moving at constant velocity over a static textured background."""

    sensor_w: int = 346
    sensor_h: int = 260
    n_frames: int = 20
    obj_w: int = 40
    obj_h: int = 30
    x0: float = 60.0
    y0: float = 80.0
    vx: float = 4.0  # pixels/frame
    vy: float = 2.0
    contrast_threshold: float = 0.15  # log-intensity units
    frame_interval_us: int = 33_333
    object_level: int = 220
    background_range: tuple[int, int] = (15, 70)
    seed: int = 0

    def box_at(self, r: int) -> BBox:
        x = int(np.floor(self.x0 + self.vx * r + 0.5))
        y = int(np.floor(self.y0 + self.vy * r + 0.5))
        return BBox(x, y, self.obj_w, self.obj_h)


@dataclass
class SyntheticSequence:
    frames: list[np.ndarray]  # uint8 (h, w)
    events: np.ndarray
    gt: list[TrackAnnotation]
    frame_times: list[int]
    sensor_w: int = field(default=346)
    sensor_h: int = field(default=260)


def log_intensity(frame: np.ndarray) -> np.ndarray:
    return np.log1p(frame.astype(np.float64))


def interval_events(prev: np.ndarray, cur: np.ndarray, t0: int, t1: int, threshold: float) -> np.ndarray:
    """Threshold-crossing events between two frames.

    A pixel whose log intensity moves by ``d`` fires ``floor(|d| / threshold)``
    events of polarity ``sign(d)``; the k-th lands where the linearly
    interpolated log intensity crosses ``k * threshold``.
    """
    d = log_intensity(cur) - log_intensity(prev)
    n = np.floor(np.abs(d) / threshold).astype(np.int64)
    ys, xs = np.nonzero(n)
    counts = n[ys, xs]
    if counts.size == 0:
        return np.zeros(0, dtype=EVENT_DTYPE)
    rep = np.repeat(np.arange(counts.size), counts)
    k = np.arange(rep.size) - np.repeat(np.cumsum(counts) - counts, counts) + 1
    mag = np.abs(d[ys, xs])[rep]
    dt = t1 - t0
    t = t0 + np.minimum(np.floor(k * threshold / mag * dt).astype(np.int64), dt - 1)
    p = np.sign(d[ys, xs])[rep].astype(np.int8)
    x, y = xs[rep], ys[rep]
    order = np.lexsort((x, y, t))
    return make_events(t[order].astype(np.uint64), x[order], y[order], p[order])


def generate_synthetic(config: SyntheticSceneConfig) -> SyntheticSequence:
    """Render frames, emit events between consecutive frames, and record the exact boxes."""
    c = config
    for r in range(c.n_frames):
        b = c.box_at(r)
        if b.x < 0 or b.y < 0 or b.x + b.w > c.sensor_w or b.y + b.h > c.sensor_h:
            raise ValueError(f"object leaves the {c.sensor_w}x{c.sensor_h} sensor at frame {r}: {b}")
    rng = np.random.default_rng(c.seed)
    lo, hi = c.background_range
    background = rng.integers(lo, hi + 1, size=(c.sensor_h, c.sensor_w), dtype=np.int64).astype(np.uint8)

    frames, gt = [], []
    for r in range(c.n_frames):
        b = c.box_at(r)
        img = background.copy()
        img[int(b.y):int(b.y + b.h), int(b.x):int(b.x + b.w)] = c.object_level
        frames.append(img)
        gt.append(TrackAnnotation(r, BBox(float(b.x), float(b.y), float(b.w), float(b.h)), False))

    frame_times = [r * c.frame_interval_us for r in range(c.n_frames)]
    chunks = [
        interval_events(frames[r - 1], frames[r], frame_times[r - 1], frame_times[r], c.contrast_threshold)
        for r in range(1, c.n_frames)
    ]
    events = np.concatenate(chunks) if chunks else np.zeros(0, dtype=EVENT_DTYPE)
    # rebuild so padding bytes are zero (concatenate leaves them undefined)
    events = make_events(events["t"], events["x"], events["y"], events["p"])
    return SyntheticSequence(frames, events, gt, frame_times, c.sensor_w, c.sensor_h)


# --- sequence directories --------------------------------------------------


def save_sequence(directory: str | Path, seq: SyntheticSequence) -> None:
    """Layout: ``frames/NNNNNN.pgm``, ``events.bin``, ``frame_times.txt``, ``groundtruth.txt``."""
    from .represent import write_pnm

    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    for r, f in enumerate(seq.frames):
        write_pnm(d / "frames" / f"{r:06d}.pgm", f)
    save_events(d / "events.bin", seq.events, (seq.sensor_w, seq.sensor_h))
    (d / "frame_times.txt").write_text("".join(f"{t}\n" for t in seq.frame_times))
    (d / "groundtruth.txt").write_text(format_annotations(seq.gt))


def load_sequence(directory: str | Path) -> SyntheticSequence:
    from .represent import read_pnm

    d = Path(directory)
    frames = [read_pnm(p) for p in sorted((d / "frames").glob("*.p?m"))]
    ev_path = d / "events.bin" if (d / "events.bin").exists() else d / "events.csv"
    events, sensor = load_events(ev_path)
    if sensor is None:
        h, w = frames[0].shape[:2]
        sensor = (w, h)
    frame_times = [int(s) for s in (d / "frame_times.txt").read_text().split()]
    gt_path = d / "groundtruth.txt"
    gt = parse_annotations(gt_path.read_text()) if gt_path.exists() else []
    if len(frame_times) != len(frames):
        raise ValueError(f"{len(frames)} frames but {len(frame_times)} frame timestamps")
    return SyntheticSequence(frames, events, gt, frame_times, sensor[0], sensor[1])
