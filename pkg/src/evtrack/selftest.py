"""Numerical self-checks: finite-difference gradients and oracle comparisons.

Each check returns a :class:`CheckResult`. Implementations under test can
be swapped in through keyword arguments, which is how the test suite shows
that a broken GIoU is caught.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import oracles
from .event_io import make_events, EventWindow
from .loss import box_iou, focal_loss, gaussian_target, giou_loss, l1_loss, total_loss
from .metrics import boc
from .model import (
    HeadOutput, ModelConfig, ModelParams, adapter_block, attention, param_shapes, tracking_head,
    transformer_block, unified_positions,
)
from .voxel import GridSpec, voxelize

GRAD_TOL = 1e-4
ATTN_TOL = 1e-6
RASTER_TOL = 1e-3
KINK_MARGIN = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def random_box(rng, lo=0.2, hi=0.8, smin=0.05, smax=0.5) -> np.ndarray:
    return np.array([*rng.uniform(lo, hi, 2), *rng.uniform(smin, smax, 2)])


def random_inside_box(rng) -> np.ndarray:
    """Normalized box fully inside the unit square."""
    w, h = rng.uniform(0.05, 0.6, 2)
    return np.array([rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h])


def check_focal_gradients(n: int = 100, seed: int = 0, fn=focal_loss) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        pred = rng.uniform(0.05, 0.95, (16, 16))
        target = gaussian_target(random_box(rng, 0.0, 0.99), 16)
        _, g = fn(pred, target)
        fd = oracles.central_diff(lambda p: fn(p, target)[0], pred, h=1e-4)
        worst = max(worst, oracles.rel_error(g, fd))
    return CheckResult("focal_gradient", worst < GRAD_TOL, f"{n} instances, worst rel err {worst:.2e}")


def check_l1_gradients(n: int = 100, seed: int = 1, fn=l1_loss) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, done = 0.0, 0
    while done < n:
        gt, pred = random_box(rng), random_box(rng)
        if np.abs(pred - gt).min() < KINK_MARGIN:
            continue
        _, g = fn(gt, pred)
        fd = oracles.central_diff(lambda b: fn(gt, b)[0], pred, h=1e-7)
        worst = max(worst, oracles.rel_error(g, fd))
        done += 1
    return CheckResult("l1_gradient", worst < GRAD_TOL, f"{n} instances, worst rel err {worst:.2e}")


def check_giou_gradients(n: int = 100, seed: int = 2, fn=giou_loss) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        gt, pred = random_box(rng), random_box(rng)
        _, g = fn(gt, pred)
        fd = oracles.central_diff(lambda b: fn(gt, b)[0], pred, h=1e-7)
        worst = max(worst, oracles.rel_error(g, fd))
    return CheckResult("giou_gradient", worst < GRAD_TOL, f"{n} instances, worst rel err {worst:.2e}")


def toy_config(**kw) -> ModelConfig:
    base = dict(width=8, n_heads=2, n_layers=1)
    base.update(kw)
    return ModelConfig(**base)


def head_from_params(params: ModelParams, rng) -> HeadOutput:
    cfg = params.config
    u = rng.normal(size=(cfg.seq_len, cfg.width))
    return tracking_head(u, params)


def random_head(rng, s: int = 16) -> HeadOutput:
    return HeadOutput(rng.uniform(0.05, 0.95, (s, s)), rng.uniform(0.02, 0.98, (s, s, 2)),
                      rng.uniform(0.05, 0.9, (s, s, 2)))


def _flat_head(h: HeadOutput) -> np.ndarray:
    return np.concatenate([h.score.ravel(), h.offset.ravel(), h.size.ravel()])


def _unflat_head(v: np.ndarray, s: int) -> HeadOutput:
    a = s * s
    return HeadOutput(v[:a].reshape(s, s), v[a:3 * a].reshape(s, s, 2), v[3 * a:].reshape(s, s, 2))


def check_total_gradients(n: int = 100, seed: int = 3, params: ModelParams | None = None) -> CheckResult:
    """FD check of the full objective w.r.t. every head-map entry.

    With ``params`` the maps come from that model's head on random tokens,
    so a perturbed model is checked against its own outputs.
    """
    rng = np.random.default_rng(seed)
    worst, done = 0.0, 0
    while done < n:
        head = head_from_params(params, rng) if params is not None else random_head(rng)
        s = head.map_size
        gt = random_inside_box(rng)
        res = total_loss(head, gt)
        i, j = int(np.floor(gt[1] * s)), int(np.floor(gt[0] * s))
        pred = np.array([(j + head.offset[i, j, 0]) / s, (i + head.offset[i, j, 1]) / s, *head.size[i, j]])
        if np.abs(pred - gt).min() < KINK_MARGIN:
            continue
        fd = oracles.central_diff(lambda v: total_loss(_unflat_head(v, s), gt).value, _flat_head(head), h=1e-7)
        worst = max(worst, oracles.rel_error(_flat_head(res.grad), fd))
        done += 1
    return CheckResult("total_loss_gradient", worst < GRAD_TOL, f"{n} instances, worst rel err {worst:.2e}")


def check_raster_iou(n: int = 200, seed: int = 4, fn=box_iou) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        a, b = random_inside_box(rng), random_inside_box(rng)
        worst = max(worst, abs(fn(a, b) - oracles.raster_iou(a, b)))
    return CheckResult("iou_raster", worst <= RASTER_TOL, f"{n} pairs at 1000x, worst abs err {worst:.2e}")


def check_raster_giou(n: int = 200, seed: int = 5, fn=giou_loss) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, in_range = 0.0, True
    for _ in range(n):
        a, b = random_inside_box(rng), random_inside_box(rng)
        loss = fn(a, b)[0]
        in_range &= 0.0 <= loss < 2.0
        worst = max(worst, abs((1.0 - loss) - oracles.raster_giou(a, b)))
    ok = worst <= RASTER_TOL and in_range
    return CheckResult("giou_raster", ok, f"{n} pairs at 1000x, worst abs err {worst:.2e}, range ok={in_range}")


def random_block_params(cfg: ModelConfig, rng, kind: str, scale: float = 0.5) -> dict[str, np.ndarray]:
    prefix = "block0." if kind == "block" else "adapter0."
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith(prefix):
            key = name[len(prefix):]
            if key.endswith(".g"):
                out[key] = 1.0 + rng.uniform(-0.2, 0.2, shape)
            else:
                out[key] = rng.uniform(-scale, scale, shape)
    return out


def check_attention(n_seeds: int = 20, seed: int = 6) -> CheckResult:
    cfg = toy_config()
    worst_block = worst_adapter = worst_rows = 0.0
    identity_ok = True
    for s in range(n_seeds):
        rng = np.random.default_rng(seed * 1000 + s)
        seq = int(rng.integers(1, 17))
        u = rng.normal(size=(seq, cfg.width))
        p = random_block_params(cfg, rng, "block")
        ref = oracles.naive_transformer_block(u, p, cfg.n_heads)
        worst_block = max(worst_block, oracles.rel_error(transformer_block(u, p, cfg.n_heads), ref))

        u_out = rng.normal(size=u.shape)
        pa = random_block_params(cfg, rng, "adapter")
        nz = seq // 2
        pz, px = rng.normal(size=(nz, cfg.width)), rng.normal(size=(seq - nz, cfg.width))
        # unified layout needs 2*(nz + nx) tokens; reuse the halves twice
        u2_in = np.concatenate([u, u])
        u2_out = np.concatenate([u_out, u_out])
        got = adapter_block(u2_in, u2_out, pa, pz, px, cfg.n_heads)
        ref = oracles.naive_adapter_block(u2_in, u2_out, pa, unified_positions(pz, px), cfg.n_heads)
        worst_adapter = max(worst_adapter, oracles.rel_error(got, ref))

        _, w = attention(u, u_out, u_out, cfg.n_heads, return_weights=True)
        worst_rows = max(worst_rows, float(np.abs(w.sum(axis=-1) - 1.0).max()))

        zero = {k: (np.ones_like(v) if k.endswith(".g") else np.zeros_like(v)) for k, v in p.items()}
        identity_ok &= np.array_equal(transformer_block(u, zero, cfg.n_heads), u)
        zero_a = {k: (np.ones_like(v) if k.endswith(".g") else np.zeros_like(v)) for k, v in pa.items()}
        identity_ok &= np.array_equal(adapter_block(u2_in, u2_out, zero_a, pz, px, cfg.n_heads), u2_out)
    ok = worst_block <= ATTN_TOL and worst_adapter <= ATTN_TOL and worst_rows <= 1e-6 and identity_ok
    return CheckResult("attention_oracle", ok,
                       f"block {worst_block:.1e}, adapter {worst_adapter:.1e}, softmax rows {worst_rows:.1e}, "
                       f"residual identity {'exact' if identity_ok else 'BROKEN'}")


def random_window(rng, n_events: int, sensor=(346, 260), t0: int = 0, t1: int = 50_000) -> EventWindow:
    t = np.sort(rng.integers(t0, t1, n_events)).astype(np.uint64)
    ev = make_events(t, rng.integers(0, sensor[0], n_events), rng.integers(0, sensor[1], n_events),
                     rng.choice(np.array([-1, 1], dtype=np.int8), n_events))
    return EventWindow(ev, t0, t1, *sensor)


def check_voxel_histogram(n: int = 100, seed: int = 7, events_per_window: int = 2000) -> CheckResult:
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(n):
        win = random_window(rng, int(rng.integers(0, events_per_window)))
        spec = GridSpec.for_window(win)
        vs = voxelize(win, spec)
        hist = np.zeros((spec.tau, spec.n, spec.m), np.int64)
        hist[vs.cells[:, 2], vs.cells[:, 1], vs.cells[:, 0]] = vs.counts
        ref = oracles.dense_histogram(win.events, spec.m, spec.n, spec.tau, spec.sensor_w,
                                      spec.sensor_h, spec.t_start, spec.t_end)
        ok &= np.array_equal(hist, ref) and int(vs.counts.sum()) == len(win)
    cells = GridSpec(346, 260, 0, 1).n_cells
    ok &= cells == 17680
    return CheckResult("voxel_histogram", ok, f"{n} windows vs dense histogram; default grid {cells} cells")


def check_boc_examples() -> CheckResult:
    ex = boc([0.8, 0.4], np.array([[0.9, 0.2], [0.7, 0.4]]))
    perfect = boc([0.3, 0.9], np.ones((3, 2)))
    zero = boc([0.0, 0.0], np.array([[0.1, 0.5]]))
    ok = abs(ex - 22.0) < 1e-9 and perfect == 0.0 and zero == 0.0
    return CheckResult("boc_examples", ok, f"example {ex:.12g} (expect 22), perfect baselines {perfect}, zero eval {zero}")


def run_selftest(giou_fn: Callable = giou_loss, params: ModelParams | None = None,
                 n: int = 100) -> list[CheckResult]:
    results = []
    checks = [
        ("focal", lambda: check_focal_gradients(n)),
        ("l1", lambda: check_l1_gradients(n)),
        ("giou", lambda: check_giou_gradients(n, fn=giou_fn)),
        ("total", lambda: check_total_gradients(n, params=params)),
        ("iou_raster", lambda: check_raster_iou(2 * n)),
        ("giou_raster", lambda: check_raster_giou(2 * n, fn=giou_fn)),
        ("attention", lambda: check_attention()),
        ("voxel", lambda: check_voxel_histogram(n)),
        ("boc", check_boc_examples),
    ]
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            r = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed run
            r = CheckResult(name, False, f"raised {type(exc).__name__}: {exc}")
        r.detail += f" [{time.perf_counter() - t0:.1f}s]"
        results.append(r)
    return results
