"""``evtrack`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation. Every subcommand reads an optional ``key=value`` config file;
``--set key=value`` flags override it, and ``--dump-config`` writes the
effective configuration for reproducing a run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import event_io
from .boxes import BBox
from .event_io import (
    AnnotationParseError, EventParseError, EventValidationError, SyntheticSceneConfig,
    frame_windows, generate_synthetic, load_events, load_sequence, parse_annotations,
    parse_attributes, parse_results, save_events, save_sequence, slice_window,
)
from .metrics import VideoResult, aggregate, parse_baseline_table
from .model import ModelConfig, ModelParams
from .represent import (
    blend_early_fusion, read_pnm, render_event_frame, render_time_surface, time_surface_to_rgb,
    to_rgb, write_pnm,
)
from .tracker import TrackerSettings, track_sequence, voxelize_windows
from .voxel import (
    Region, SEARCH_TOPK, TEMPLATE_TOPK, crop_region, filter_voxels, select_top_k,
)

log = logging.getLogger("evtrack")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # voxel grid and sampling
    grid_m: int = 34
    grid_n: int = 26
    grid_tau: int = 20
    search_topk: int = SEARCH_TOPK
    template_topk: int = TEMPLATE_TOPK
    template_factor: float = 2.0
    search_factor: float = 4.0
    # model
    template_px: int = 128
    search_px: int = 256
    width: int = 64
    n_layers: int = 12
    n_heads: int = 4
    # loss weights (selftest / documentation)
    lambda_focal: float = 1.0
    lambda_l1: float = 1.0
    lambda_giou: float = 14.0
    # rendering; 0 means half the window
    decay_tau: float = 0.0
    # synthetic scenes
    sensor_w: int = 346
    sensor_h: int = 260
    n_frames: int = 20
    obj_w: int = 40
    obj_h: int = 30
    x0: float = 60.0
    y0: float = 80.0
    vx: float = 4.0
    vy: float = 2.0
    contrast_threshold: float = 0.15
    frame_interval_us: int = 33_333
    # run control
    seed: int = 0
    threads: int = 1

    def model_config(self) -> ModelConfig:
        return ModelConfig(width=self.width, n_layers=self.n_layers, n_heads=self.n_heads,
                           template_px=self.template_px, search_px=self.search_px,
                           template_topk=self.template_topk, search_topk=self.search_topk, seed=self.seed)

    def tracker_settings(self) -> TrackerSettings:
        return TrackerSettings(self.grid_m, self.grid_n, self.grid_tau, self.template_factor, self.search_factor)

    def scene(self) -> SyntheticSceneConfig:
        return SyntheticSceneConfig(
            sensor_w=self.sensor_w, sensor_h=self.sensor_h, n_frames=self.n_frames, obj_w=self.obj_w,
            obj_h=self.obj_h, x0=self.x0, y0=self.y0, vx=self.vx, vy=self.vy,
            contrast_threshold=self.contrast_threshold, frame_interval_us=self.frame_interval_us, seed=self.seed,
        )

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise UsageError(f"unknown config key {name!r}")
    kind = types[name]
    try:
        return int(raw) if kind in ("int", int) else float(raw)
    except ValueError:
        raise UsageError(f"config key {name}: cannot parse {raw!r} as {kind}") from None


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"config line {lineno}: expected key=value")
        out[key.strip()] = _coerce(key.strip(), value.strip())
    return out


def build_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_text(Path(args.config).read_text()))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = _coerce(key.strip(), value.strip())
    for key in ("seed", "threads"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    cfg = RunConfig(**values)
    if getattr(args, "dump_config", None):
        Path(args.dump_config).write_text(cfg.dumps())
    return cfg


# --- subcommands -----------------------------------------------------------


def cmd_events(args, cfg: RunConfig) -> int:
    events, sensor = load_events(args.input)
    if args.sensor:
        sensor = tuple(args.sensor)
    sensor = sensor or (cfg.sensor_w, cfg.sensor_h)
    event_io.validate_events(events, *sensor)
    if args.action == "slice":
        if args.t0 is None or args.t1 is None:
            raise UsageError("events slice needs --t0 and --t1")
        events = slice_window(events, args.t0, args.t1, *sensor).events
    save_events(args.output, events, sensor)
    print(f"wrote {events.size} events to {args.output}")
    return EXIT_OK


def _read_frame_times(path) -> list[int]:
    try:
        return [int(s) for s in Path(path).read_text().split()]
    except ValueError as exc:
        raise ValueError(f"{path}: bad frame timestamp ({exc})") from None


def voxelize_sequence(events: np.ndarray, frame_times, sensor, cfg: RunConfig, gt=None) -> dict[str, bytes]:
    """Serialized voxel tensors keyed by file name: one template, one search per later frame."""
    windows = frame_windows(events, frame_times, *sensor)
    sets = voxelize_windows(windows, cfg.tracker_settings(), cfg.threads)
    full = Region.full_sensor(*sensor)
    out = {}
    for r, vs in enumerate(sets, start=1):
        region = full if gt is None else crop_region(gt[r - 1].box, cfg.search_factor, sensor)
        out[f"search_{r:06d}.vox"] = select_top_k(filter_voxels(vs, region), cfg.search_topk).to_bytes()
    if sets:
        region = full if gt is None else crop_region(gt[0].box, cfg.template_factor, sensor)
        out["template.vox"] = select_top_k(filter_voxels(sets[0], region), cfg.template_topk).to_bytes()
    return out


def cmd_voxelize(args, cfg: RunConfig) -> int:
    events, sensor = load_events(args.events)
    sensor = sensor or (cfg.sensor_w, cfg.sensor_h)
    frame_times = _read_frame_times(args.frame_times)
    gt = parse_annotations(Path(args.gt).read_text()) if args.gt else None
    files = voxelize_sequence(events, frame_times, sensor, cfg, gt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, data in files.items():
        (out / name).write_bytes(data)
    print(f"wrote {len(files)} voxel tensors to {out}")
    return EXIT_OK


def render_sequence(events, frame_times, sensor, mode: str, cfg: RunConfig, frames=None) -> list[np.ndarray]:
    w, h = sensor
    images = []
    for r, win in enumerate(frame_windows(events, frame_times, w, h), start=1):
        if mode == "frame":
            images.append(render_event_frame(win, w, h))
        elif mode == "timesurface":
            images.append(time_surface_to_rgb(render_time_surface(win, w, h, cfg.decay_tau or None)))
        elif mode == "blend":
            if frames is None:
                raise UsageError("blend mode needs --frames")
            images.append(blend_early_fusion(to_rgb(frames[r]), render_event_frame(win, w, h)))
        else:
            raise UsageError(f"unknown render mode {mode!r}")
    return images


def cmd_render(args, cfg: RunConfig) -> int:
    events, sensor = load_events(args.events)
    sensor = sensor or (cfg.sensor_w, cfg.sensor_h)
    frames = None
    if args.frames:
        frames = [read_pnm(p) for p in sorted(Path(args.frames).glob("*.p?m"))]
    images = render_sequence(events, _read_frame_times(args.frame_times), sensor, args.mode, cfg, frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r, img in enumerate(images, start=1):
        write_pnm(out / f"{args.mode}_{r:06d}.ppm", img)
    print(f"wrote {len(images)} {args.mode} images to {out}")
    return EXIT_OK


def cmd_model_init(args, cfg: RunConfig) -> int:
    params = ModelParams.init(cfg.model_config(), cfg.seed)
    params.save(args.out)
    print(f"wrote {sum(params.stored(n).size for n in params)} parameters to {args.out}")
    return EXIT_OK


def run_track(seq_dir, cfg: RunConfig, params_path=None, init: str | None = None) -> list[BBox]:
    seq = load_sequence(seq_dir)
    if params_path:
        params = ModelParams.load(params_path)
    else:
        params = ModelParams.init(cfg.model_config(), cfg.seed)
    if init:
        init_box = BBox(*(float(v) for v in init.split(",")))
    elif seq.gt:
        init_box = seq.gt[0].box
    else:
        raise UsageError("no --init box and no groundtruth.txt in the sequence")
    return track_sequence(seq.frames, seq.events, seq.frame_times, init_box, params,
                          cfg.tracker_settings(), cfg.threads)


def cmd_track(args, cfg: RunConfig) -> int:
    boxes = run_track(args.sequence, cfg, args.params, args.init)
    Path(args.out).write_text(event_io.format_results(boxes))
    print(f"wrote {len(boxes)} boxes to {args.out}")
    return EXIT_OK


def _gt_path(gt_dir: Path, vid: str) -> Path:
    for p in (gt_dir / f"{vid}.txt", gt_dir / vid / "groundtruth.txt"):
        if p.exists():
            return p
    raise FileNotFoundError(f"no ground truth for video {vid} under {gt_dir}")


def load_video_results(results_dir, gt_dir, attributes_file=None) -> list[VideoResult]:
    attrs = parse_attributes(Path(attributes_file).read_text()) if attributes_file else {}
    gt_dir = Path(gt_dir)
    out = []
    for p in sorted(Path(results_dir).glob("*.txt")):
        vid = p.stem
        preds = parse_results(p.read_text())
        gt = parse_annotations(_gt_path(gt_dir, vid).read_text())
        out.append(VideoResult(vid, preds, gt, attrs.get(vid, frozenset())))
    if not out:
        raise ValueError(f"no result files in {results_dir}")
    return out


def cmd_eval(args, cfg: RunConfig) -> int:
    results = load_video_results(args.results, args.gt, args.attributes)
    if args.attribute:
        results = [r for r in results if args.attribute in r.attributes]
        if not results:
            raise ValueError(f"no video carries attribute {args.attribute}")
    baselines = parse_baseline_table(Path(args.baselines).read_text()) if args.baselines else None
    report = aggregate(results, baselines)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    (out / "curves.csv").write_text(report.curves_csv())
    s = report.overall
    line = f"SR {s.sr:.2f}  PR {s.pr:.2f}  NPR {s.npr:.2f}"
    line += f"  BOC {report.boc:.2f}" if report.boc is not None else "  BOC n/a"
    print(line)
    for notice in report.notices:
        print(f"notice: {notice}")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    seq = generate_synthetic(cfg.scene())
    save_sequence(args.out, seq)
    print(f"wrote {len(seq.frames)} frames, {seq.events.size} events to {args.out}")
    return EXIT_OK


def cmd_selftest(args, cfg: RunConfig) -> int:
    from .selftest import run_selftest

    results = run_selftest(n=args.n)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_INTERNAL


def bench_once(data: bytes, fmt: str, frame_times, cfg: RunConfig) -> tuple[int, str]:
    """Parse and voxelize; returns the event count and a digest of every voxel set."""
    events = event_io.parse_events(data, fmt)
    sensor = event_io.binary_header(data)[:2] if fmt == "binary" else (cfg.sensor_w, cfg.sensor_h)
    if frame_times is None:
        t_end = int(events["t"][-1]) + 1 if events.size else 1
        step = max(1, -(-(t_end - int(events["t"][0] if events.size else 0)) // 20))
        start = int(events["t"][0]) if events.size else 0
        frame_times = list(range(start, t_end + step, step))
    windows = frame_windows(events, frame_times, *sensor)
    sets = voxelize_windows(windows, cfg.tracker_settings(), cfg.threads)
    h = hashlib.sha256()
    for vs in sets:
        h.update(vs.cells.tobytes())
        h.update(vs.counts.tobytes())
        h.update(vs.feats.tobytes())
    return int(sum(len(w) for w in windows)), h.hexdigest()


def cmd_bench(args, cfg: RunConfig) -> int:
    data = Path(args.events).read_bytes()
    fmt = event_io.format_from_path(args.events)
    frame_times = _read_frame_times(args.frame_times) if args.frame_times else None
    best = float("inf")
    count, digest = 0, ""
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        count, digest = bench_once(data, fmt, frame_times, cfg)
        best = min(best, time.perf_counter() - t0)
    rate = count / best if best > 0 else float("inf")
    print(f"events={count} threads={cfg.threads} best_seconds={best:.4f} events_per_second={rate:.0f} digest={digest[:16]}")
    return EXIT_OK


# --- entry point -----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--dump-config", metavar="PATH", help="write the effective config")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="evtrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("events", parents=[common], help="convert or slice event files")
    s.add_argument("action", choices=["convert", "slice"])
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--t0", type=int)
    s.add_argument("--t1", type=int)
    s.add_argument("--sensor", type=int, nargs=2, metavar=("W", "H"))
    s.set_defaults(func=cmd_events)

    s = sub.add_parser("voxelize", parents=[common], help="top-k voxel tensors per frame interval")
    s.add_argument("--events", required=True)
    s.add_argument("--frame-times", required=True)
    s.add_argument("--gt", help="ground truth used to place template/search crops")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("render", parents=[common], help="event frames, time surfaces or early-fusion blends")
    s.add_argument("--events", required=True)
    s.add_argument("--frame-times", required=True)
    s.add_argument("--mode", choices=["frame", "timesurface", "blend"], default="frame")
    s.add_argument("--frames", help="directory of PGM/PPM color frames (blend mode)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("model", parents=[common], help="create toy model checkpoints")
    s.add_argument("action", choices=["init"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_model_init)

    s = sub.add_parser("track", parents=[common], help="run the tracker on a sequence directory")
    s.add_argument("--sequence", required=True)
    s.add_argument("--params", help="checkpoint from 'evtrack model init'; seeded toy model if omitted")
    s.add_argument("--init", help="x,y,w,h initial box (default: first ground-truth line)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", parents=[common], help="SR/PR/NPR/BOC report")
    s.add_argument("--results", required=True, help="directory of <video>.txt result files")
    s.add_argument("--gt", required=True, help="directory of <video>.txt or <video>/groundtruth.txt")
    s.add_argument("--attributes")
    s.add_argument("--baselines", help="CSV: video_id,tracker1,...")
    s.add_argument("--attribute", help="evaluate only videos carrying this tag")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic color-event sequence")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("selftest", parents=[common], help="gradient and oracle checks")
    s.add_argument("-n", type=int, default=100, help="instances per randomized check")
    s.set_defaults(func=cmd_selftest)

    s = sub.add_parser("bench", parents=[common], help="parse + voxelize throughput")
    s.add_argument("--events", required=True)
    s.add_argument("--frame-times")
    s.add_argument("--repeat", type=int, default=3)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported by argparse
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"evtrack: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EventParseError, EventValidationError, AnnotationParseError, FileNotFoundError, ValueError) as exc:
        print(f"evtrack: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (AssertionError, FloatingPointError) as exc:
        print(f"evtrack: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
