"""Slow reference implementations used to cross-check the fast paths.

Nothing here is vectorized the way the production code is: loops over
tokens, pixels and events, written for obviousness. The self-test command
and the test suite both draw on these.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), np.linalg.norm(a), floor))


# --- attention -------------------------------------------------------------


def naive_layer_norm(x, g, b, eps=1e-6):
    out = np.zeros_like(x)
    for i, row in enumerate(x):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[i] = [(v - mu) / math.sqrt(var + eps) * g[j] + b[j] for j, v in enumerate(row)]
    return out


def naive_linear(x, w, b):
    out = np.zeros((x.shape[0], w.shape[1]))
    for i in range(x.shape[0]):
        for j in range(w.shape[1]):
            out[i, j] = sum(x[i, k] * w[k, j] for k in range(w.shape[0])) + b[j]
    return out


def naive_attention(q, k, v, n_heads):
    """Per-head, per-query softmax attention with explicit loops."""
    sq, c = q.shape
    dk = c // n_heads
    out = np.zeros((sq, c))
    weights = np.zeros((n_heads, sq, k.shape[0]))
    for h in range(n_heads):
        sl = slice(h * dk, (h + 1) * dk)
        for i in range(sq):
            logits = [sum(q[i, sl] * k[j, sl]) / math.sqrt(dk) for j in range(k.shape[0])]
            m = max(logits)
            e = [math.exp(l - m) for l in logits]
            z = sum(e)
            for j in range(k.shape[0]):
                weights[h, i, j] = e[j] / z
                out[i, sl] += weights[h, i, j] * v[j, sl]
    return out, weights


def naive_gelu(x):
    return np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))(x)


def naive_mlp(x, p, prefix):
    return naive_linear(naive_gelu(naive_linear(x, p[prefix + "fc1.w"], p[prefix + "fc1.b"])),
                        p[prefix + "fc2.w"], p[prefix + "fc2.b"])


def naive_transformer_block(u, p: Mapping[str, np.ndarray], n_heads):
    c = u.shape[1]
    qkv = naive_linear(naive_layer_norm(u, p["ln1.g"], p["ln1.b"]), p["attn.qkv.w"], p["attn.qkv.b"])
    a, _ = naive_attention(qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:], n_heads)
    u1 = u + naive_linear(a, p["attn.out.w"], p["attn.out.b"])
    return u1 + naive_mlp(naive_layer_norm(u1, p["ln2.g"], p["ln2.b"]), p, "mlp.")


def naive_adapter_block(u_in, u_out, p, pos, n_heads):
    qs = naive_layer_norm(u_out, p["ln_q.g"], p["ln_q.b"]) + pos
    kvs = naive_layer_norm(u_in, p["ln_kv.g"], p["ln_kv.b"]) + pos
    q = naive_linear(qs, p["attn.q.w"], p["attn.q.b"])
    k = naive_linear(kvs, p["attn.k.w"], p["attn.k.b"])
    v = naive_linear(kvs, p["attn.v.w"], p["attn.v.b"])
    att, _ = naive_attention(q, k, v, n_heads)
    a = u_out + naive_linear(att, p["attn.out.w"], p["attn.out.b"])
    return a + naive_mlp(naive_layer_norm(a, p["ln_ffn.g"], p["ln_ffn.b"]), p, "ffn.")


def naive_conv3x3(x, w, b):
    h, wd, cin = x.shape
    cout = w.shape[3]
    out = np.zeros((h, wd, cout))
    for i in range(h):
        for j in range(wd):
            for o in range(cout):
                s = b[o]
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < h and 0 <= jj < wd:
                            s += float(np.dot(x[ii, jj], w[di, dj, :, o]))
                out[i, j, o] = s
    return out


def naive_patch_projection(img, w, b, patch):
    """Token (r, c) = dot(flattened patch at block (r, c), w) + b, one patch at a time."""
    h, wd, ch = img.shape
    tokens = []
    for r in range(h // patch):
        for c in range(wd // patch):
            vec = [img[r * patch + i, c * patch + j, k]
                   for i in range(patch) for j in range(patch) for k in range(ch)]
            tokens.append(np.dot(vec, w) + b)
    return np.array(tokens)


# --- geometry --------------------------------------------------------------


def _coverage(lo: float, hi: float, scale: int) -> np.ndarray:
    """Fraction of each unit pixel in [0, scale) covered by [lo, hi) (scaled)."""
    k = np.arange(scale, dtype=np.float64)
    return np.clip(np.minimum(hi * scale, k + 1) - np.maximum(lo * scale, k), 0.0, 1.0)


def raster_areas(a, b, scale: int = 1000) -> tuple[float, float, float, float]:
    """Pixel-grid areas (intersection, area a, area b, enclosing hull) of two
    normalized (cx, cy, w, h) boxes drawn on a ``scale x scale`` canvas with
    anti-aliased (exact coverage) pixels. Boxes must lie within [0, 1]."""
    def corners(bx):
        cx, cy, w, h = bx
        return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2

    ax1, ay1, ax2, ay2 = corners(a)
    bx1, by1, bx2, by2 = corners(b)
    mask_a = np.outer(_coverage(ay1, ay2, scale), _coverage(ax1, ax2, scale))
    mask_b = np.outer(_coverage(by1, by2, scale), _coverage(bx1, bx2, scale))
    inter = np.outer(_coverage(max(ay1, by1), min(ay2, by2), scale),
                     _coverage(max(ax1, bx1), min(ax2, bx2), scale))
    hull = np.outer(_coverage(min(ay1, by1), max(ay2, by2), scale),
                    _coverage(min(ax1, bx1), max(ax2, bx2), scale))
    s2 = float(scale * scale)
    return inter.sum() / s2, mask_a.sum() / s2, mask_b.sum() / s2, hull.sum() / s2


def raster_iou(a, b, scale: int = 1000) -> float:
    i, aa, ab, _ = raster_areas(a, b, scale)
    return i / (aa + ab - i)


def raster_giou(a, b, scale: int = 1000) -> float:
    i, aa, ab, hull = raster_areas(a, b, scale)
    u = aa + ab - i
    return i / u - (hull - u) / hull


def integer_raster_iou(a, b) -> float:
    """IoU of integer-pixel xywh boxes by painting both on a boolean canvas."""
    x2 = int(max(a[0] + a[2], b[0] + b[2])) + 1
    y2 = int(max(a[1] + a[3], b[1] + b[3])) + 1
    ma = np.zeros((y2, x2), bool)
    mb = np.zeros((y2, x2), bool)
    ma[int(a[1]):int(a[1] + a[3]), int(a[0]):int(a[0] + a[2])] = True
    mb[int(b[1]):int(b[1] + b[3]), int(b[0]):int(b[0] + b[2])] = True
    u = (ma | mb).sum()
    return float((ma & mb).sum() / u) if u else 0.0


# --- events ----------------------------------------------------------------


def dense_histogram(events, m, n, tau, sensor_w, sensor_h, t_start, t_end) -> np.ndarray:
    """(tau, n, m) event counts, one event at a time with exact integer binning."""
    hist = np.zeros((tau, n, m), dtype=np.int64)
    span = t_end - t_start
    for e in events:
        ix = min(int(e["x"]) * m // sensor_w, m - 1)
        iy = min(int(e["y"]) * n // sensor_h, n - 1)
        iz = min((int(e["t"]) - t_start) * tau // span, tau - 1)
        hist[iz, iy, ix] += 1
    return hist


def two_pass_stats(ox, oy, ot):
    """Means, population stds and covariances from explicit two-pass sums."""
    n = len(ox)
    mx, my, mt = sum(ox) / n, sum(oy) / n, sum(ot) / n
    dx = [v - mx for v in ox]
    dy = [v - my for v in oy]
    dt = [v - mt for v in ot]
    sx = math.sqrt(sum(v * v for v in dx) / n)
    sy = math.sqrt(sum(v * v for v in dy) / n)
    st = math.sqrt(sum(v * v for v in dt) / n)
    cxy = sum(a * b for a, b in zip(dx, dy)) / n
    cxt = sum(a * b for a, b in zip(dx, dt)) / n
    cyt = sum(a * b for a, b in zip(dy, dt)) / n
    return (mx, my, mt), (sx, sy, st), (cxy, cxt, cyt)


def brute_force_decode(score, offset, size, region_left, region_top, side_w, side_h):
    """Scan every cell for the first strict maximum, then map to pixels (cx, cy, w, h)."""
    s = score.shape[0]
    best, bi, bj = -math.inf, 0, 0
    for i in range(s):
        for j in range(s):
            if score[i, j] > best:
                best, bi, bj = score[i, j], i, j
    cx = region_left + (bj + offset[bi, bj, 0]) / s * side_w
    cy = region_top + (bi + offset[bi, bj, 1]) / s * side_h
    return cx, cy, size[bi, bj, 0] * side_w, size[bi, bj, 1] * side_h


# --- dense renderings --------------------------------------------------------


def naive_event_frame(events, w, h):
    """Red/blue count image scaled by the largest count, one event at a time."""
    counts = [[[0, 0] for _ in range(w)] for _ in range(h)]
    for e in events:
        counts[int(e["y"])][int(e["x"])][0 if e["p"] > 0 else 1] += 1
    c_max = max([max(c) for row in counts for c in row] + [1])
    out = np.zeros((h, w, 3))
    for y in range(h):
        for x in range(w):
            out[y, x, 0] = min(counts[y][x][0] * 255.0 / c_max, 255.0)
            out[y, x, 2] = min(counts[y][x][1] * 255.0 / c_max, 255.0)
    return out


def naive_time_surface(events, w, h, t_end, decay_tau):
    last = {}
    for e in events:
        key = (int(e["y"]), int(e["x"]), 0 if e["p"] > 0 else 1)
        last[key] = max(last.get(key, -1), int(e["t"]))
    out = np.zeros((h, w, 2))
    for (y, x, c), t in last.items():
        out[y, x, c] = math.exp(-(t_end - t) / decay_tau)
    return out


def naive_blend(color, event, ratio=0.2):
    out = np.zeros(color.shape)
    for idx in np.ndindex(*color.shape):
        v = (ratio * float(event[idx]) + float(color[idx])) / (1.0 + ratio)
        out[idx] = min(max(v, 0.0), 255.0)
    return out
