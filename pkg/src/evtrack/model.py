"""Forward pass of the unified color-event transformer tracker, in numpy.

Layout of the unified token sequence (length ``2 * (n_z + n_x)``)::

    [frame template | frame search | voxel template | voxel search]

Template/search position embeddings are shared by both modalities. Every
backbone layer is a pre-norm transformer block followed by an adapter that
cross-attends from the block output (queries) to the block input (keys and
values). The head reads the element-wise mean of the two search groups.

All arithmetic is float64. Parameters are stored as float32 so a saved
checkpoint reproduces a run exactly.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import erf

from .boxes import BBox
from .voxel import ROW_WIDTH, Region, VoxelTensor

LN_EPS = 1e-6
INIT_SCALE = 0.02
HEAD_STAGES = 4
HEAD_BRANCHES = {"score": 1, "offset": 2, "size": 2}
PARAMS_MAGIC = b"EVTP"


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64  # 768 for the full-size backbone
    n_layers: int = 12
    n_heads: int = 4
    mlp_ratio: int = 4
    template_px: int = 128
    search_px: int = 256
    frame_patch: int = 16
    voxel_patch: int = 4
    template_topk: int = 1024
    search_topk: int = 4096
    head_channels: int = 0  # 0 means "same as width"
    seed: int = 0

    def __post_init__(self):
        if self.width % self.n_heads:
            raise ValueError(f"width {self.width} not divisible by n_heads {self.n_heads}")
        for px in (self.template_px, self.search_px):
            if px % self.frame_patch:
                raise ValueError(f"crop size {px} not divisible by frame patch {self.frame_patch}")
        for k in (self.template_topk, self.search_topk):
            side = int(round(np.sqrt(k)))
            if side * side != k or side % self.voxel_patch:
                raise ValueError(f"top-k {k} does not reshape into a square grid of {self.voxel_patch}-patches")
        if self.template_grid // self.voxel_patch != self.template_px // self.frame_patch:
            raise ValueError("template voxel tokens must match template frame tokens")
        if self.search_grid // self.voxel_patch != self.search_px // self.frame_patch:
            raise ValueError("search voxel tokens must match search frame tokens")

    @property
    def n_z(self) -> int:
        return (self.template_px // self.frame_patch) ** 2

    @property
    def n_x(self) -> int:
        return (self.search_px // self.frame_patch) ** 2

    @property
    def template_grid(self) -> int:
        return int(round(np.sqrt(self.template_topk)))

    @property
    def search_grid(self) -> int:
        return int(round(np.sqrt(self.search_topk)))

    @property
    def map_size(self) -> int:
        return self.search_px // self.frame_patch

    @property
    def seq_len(self) -> int:
        return 2 * (self.n_z + self.n_x)

    @property
    def head_width(self) -> int:
        return self.head_channels or self.width


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in canonical (init and storage) order."""
    C, hid = cfg.width, cfg.width * cfg.mlp_ratio
    fp, vp = cfg.frame_patch, cfg.voxel_patch
    s: dict[str, tuple[int, ...]] = {}
    for role in ("frame_z", "frame_x"):
        s[f"proj.{role}.w"] = (fp * fp * 3, C)
        s[f"proj.{role}.b"] = (C,)
    for role in ("voxel_z", "voxel_x"):
        s[f"proj.{role}.w"] = (vp * vp * ROW_WIDTH, C)
        s[f"proj.{role}.b"] = (C,)
    s["pos.z"] = (cfg.n_z, C)
    s["pos.x"] = (cfg.n_x, C)
    for i in range(cfg.n_layers):
        b = f"block{i}."
        s[b + "ln1.g"] = s[b + "ln1.b"] = (C,)
        s[b + "attn.qkv.w"] = (C, 3 * C)
        s[b + "attn.qkv.b"] = (3 * C,)
        s[b + "attn.out.w"] = (C, C)
        s[b + "attn.out.b"] = (C,)
        s[b + "ln2.g"] = s[b + "ln2.b"] = (C,)
        s[b + "mlp.fc1.w"] = (C, hid)
        s[b + "mlp.fc1.b"] = (hid,)
        s[b + "mlp.fc2.w"] = (hid, C)
        s[b + "mlp.fc2.b"] = (C,)
        a = f"adapter{i}."
        for ln in ("ln_q", "ln_kv", "ln_ffn"):
            s[a + ln + ".g"] = s[a + ln + ".b"] = (C,)
        for proj in ("q", "k", "v", "out"):
            s[a + f"attn.{proj}.w"] = (C, C)
            s[a + f"attn.{proj}.b"] = (C,)
        s[a + "ffn.fc1.w"] = (C, hid)
        s[a + "ffn.fc1.b"] = (hid,)
        s[a + "ffn.fc2.w"] = (hid, C)
        s[a + "ffn.fc2.b"] = (C,)
    hc = cfg.head_width
    for branch, n_out in HEAD_BRANCHES.items():
        cin = C
        for k in range(HEAD_STAGES):
            p = f"head.{branch}.stage{k}."
            s[p + "conv.w"] = (3, 3, cin, hc)
            s[p + "conv.b"] = (hc,)
            s[p + "norm.scale"] = s[p + "norm.shift"] = (hc,)
            cin = hc
        s[f"head.{branch}.final.w"] = (hc, n_out)
        s[f"head.{branch}.final.b"] = (n_out,)
    return s


class ModelParams:
    """Immutable named parameter set with float64 views for computation."""

    def __init__(self, config: ModelConfig, arrays: Mapping[str, np.ndarray]):
        expected = param_shapes(config)
        missing = expected.keys() - arrays.keys()
        extra = arrays.keys() - expected.keys()
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)[:5]}, extra {sorted(extra)[:5]}")
        self.config = config
        self._stored: dict[str, np.ndarray] = {}
        self._f64: dict[str, np.ndarray] = {}
        for name, shape in expected.items():
            a = np.asarray(arrays[name], dtype=np.float32)
            if a.shape != shape:
                raise ValueError(f"{name}: shape {a.shape}, expected {shape}")
            a = a.copy()
            a.flags.writeable = False
            self._stored[name] = a
            f = a.astype(np.float64)
            f.flags.writeable = False
            self._f64[name] = f

    def __getitem__(self, name: str) -> np.ndarray:
        return self._f64[name]

    def __iter__(self):
        return iter(self._stored)

    def stored(self, name: str) -> np.ndarray:
        return self._stored[name]

    def sub(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix)
        return {k[n:]: v for k, v in self._f64.items() if k.startswith(prefix)}

    def replaced(self, **updates: np.ndarray) -> "ModelParams":
        """Copy with some arrays swapped; keys use ``__`` in place of ``.``."""
        arrays = dict(self._stored)
        for k, v in updates.items():
            arrays[k.replace("__", ".")] = v
        return ModelParams(self.config, arrays)

    @classmethod
    def init(cls, config: ModelConfig, seed: int | None = None) -> "ModelParams":
        """Seeded toy initialization: uniform weights in [-0.02, 0.02], zero biases, unit norms."""
        rng = np.random.default_rng(config.seed if seed is None else seed)
        arrays = {}
        for name, shape in param_shapes(config).items():
            if name.endswith((".g", ".scale")):
                arrays[name] = np.ones(shape)
            elif name.endswith((".b", ".shift")):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        return cls(config, arrays)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        """All-zero weights, biases and embeddings; norms keep unit gain."""
        arrays = {n: (np.ones(s) if n.endswith((".g", ".scale")) else np.zeros(s))
                  for n, s in param_shapes(config).items()}
        return cls(config, arrays)

    def to_bytes(self) -> bytes:
        tensors, offset = [], 0
        for name, a in self._stored.items():
            tensors.append({"name": name, "offset": offset, "shape": list(a.shape)})
            offset += a.size
        manifest = json.dumps({"config": asdict(self.config), "tensors": tensors}, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(PARAMS_MAGIC + struct.pack("<I", len(manifest)) + manifest)
        for a in self._stored.values():
            buf.write(a.astype("<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        if data[:4] != PARAMS_MAGIC:
            raise ValueError("not a parameter file")
        (mlen,) = struct.unpack_from("<I", data, 4)
        manifest = json.loads(data[8:8 + mlen])
        known = {f.name for f in fields(ModelConfig)}
        config = ModelConfig(**{k: v for k, v in manifest["config"].items() if k in known})
        payload = np.frombuffer(data, dtype="<f4", offset=8 + mlen)
        arrays = {}
        for t in manifest["tensors"]:
            size = int(np.prod(t["shape"], dtype=np.int64))
            arrays[t["name"]] = payload[t["offset"]:t["offset"] + size].reshape(t["shape"])
        return cls(config, arrays)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        return cls.from_bytes(Path(path).read_bytes())


# --- primitives ------------------------------------------------------------


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_heads: int,
              return_weights: bool = False):
    """Scaled dot-product attention over ``n_heads`` equal slices of the width.

    ``q`` is (Sq, C), ``k`` and ``v`` are (Sk, C). Returns the concatenated
    head outputs (Sq, C), plus the (heads, Sq, Sk) weights if asked.
    """
    sq, c = q.shape
    dk = c // n_heads
    qh = q.reshape(sq, n_heads, dk).transpose(1, 0, 2)
    kh = k.reshape(-1, n_heads, dk).transpose(1, 0, 2)
    vh = v.reshape(-1, n_heads, dk).transpose(1, 0, 2)
    w = softmax(qh @ kh.transpose(0, 2, 1) / np.sqrt(dk))
    out = (w @ vh).transpose(1, 0, 2).reshape(sq, c)
    return (out, w) if return_weights else out


def mlp(x: np.ndarray, p: Mapping[str, np.ndarray], prefix: str) -> np.ndarray:
    h = gelu(x @ p[prefix + "fc1.w"] + p[prefix + "fc1.b"])
    return h @ p[prefix + "fc2.w"] + p[prefix + "fc2.b"]


def _check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise FloatingPointError(f"non-finite values after {where}")
    return x


# --- token projection ------------------------------------------------------


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, ch) -> (H/p * W/p, p*p*ch), patches row-major, each flattened (row, col, ch)."""
    h, w, ch = img.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible into {patch}x{patch} patches")
    t = img.reshape(h // patch, patch, w // patch, patch, ch).transpose(0, 2, 1, 3, 4)
    return t.reshape(-1, patch * patch * ch)


def project_frame_tokens(patch: np.ndarray, params: ModelParams, role: str) -> np.ndarray:
    """Color crop (template 128^2 or search 256^2, 3 channels) to tokens."""
    cfg = params.config
    side = cfg.template_px if role == "z" else cfg.search_px
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (side, side, 3):
        raise ValueError(f"frame {role} patch must be ({side}, {side}, 3), got {patch.shape}")
    return patchify(patch, cfg.frame_patch) @ params[f"proj.frame_{role}.w"] + params[f"proj.frame_{role}.b"]


def project_voxel_tokens(vt: VoxelTensor | np.ndarray, params: ModelParams, role: str) -> np.ndarray:
    """Voxel rows reshaped row-major to a square grid of 19-channel cells, then patch-projected."""
    cfg = params.config
    rows = vt.data if isinstance(vt, VoxelTensor) else np.asarray(vt, dtype=np.float64)
    k = cfg.template_topk if role == "z" else cfg.search_topk
    if rows.shape != (k, ROW_WIDTH):
        raise ValueError(f"voxel {role} tensor must be ({k}, {ROW_WIDTH}), got {rows.shape}")
    side = cfg.template_grid if role == "z" else cfg.search_grid
    grid = rows.reshape(side, side, ROW_WIDTH)
    return patchify(grid, cfg.voxel_patch) @ params[f"proj.voxel_{role}.w"] + params[f"proj.voxel_{role}.b"]


def unify(ffz, ffx, fvz, fvx, pz, px) -> np.ndarray:
    if ffz.shape != pz.shape or fvz.shape != pz.shape:
        raise ValueError(f"template tokens {ffz.shape}/{fvz.shape} do not match embedding {pz.shape}")
    if ffx.shape != px.shape or fvx.shape != px.shape:
        raise ValueError(f"search tokens {ffx.shape}/{fvx.shape} do not match embedding {px.shape}")
    return np.concatenate([ffz + pz, ffx + px, fvz + pz, fvx + px], axis=0)


def unified_positions(pz: np.ndarray, px: np.ndarray) -> np.ndarray:
    return np.concatenate([pz, px, pz, px], axis=0)


# --- backbone --------------------------------------------------------------


def transformer_block(u: np.ndarray, p: Mapping[str, np.ndarray], n_heads: int) -> np.ndarray:
    """Pre-norm block: ``u + MSA(LN(u))``, then ``+ MLP(LN(.))``."""
    c = u.shape[1]
    qkv = layer_norm(u, p["ln1.g"], p["ln1.b"]) @ p["attn.qkv.w"] + p["attn.qkv.b"]
    a = attention(qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:], n_heads)
    u1 = u + a @ p["attn.out.w"] + p["attn.out.b"]
    out = u1 + mlp(layer_norm(u1, p["ln2.g"], p["ln2.b"]), p, "mlp.")
    return _check_finite(out, "transformer block")


def cross_attention(query_tokens, kv_tokens, p: Mapping[str, np.ndarray], n_heads: int) -> np.ndarray:
    q = query_tokens @ p["attn.q.w"] + p["attn.q.b"]
    k = kv_tokens @ p["attn.k.w"] + p["attn.k.b"]
    v = kv_tokens @ p["attn.v.w"] + p["attn.v.b"]
    return attention(q, k, v, n_heads) @ p["attn.out.w"] + p["attn.out.b"]


def adapter_block(u_in: np.ndarray, u_out: np.ndarray, p: Mapping[str, np.ndarray],
                  pz: np.ndarray, px: np.ndarray, n_heads: int) -> np.ndarray:
    """Cross-attend from a block's output to its input, then FFN; both residual.

    Queries come from ``LN(u_out) + P`` and keys/values from ``LN(u_in) + P``
    where ``P`` is the backbone's position embedding laid out like the
    unified sequence.
    """
    if u_in.shape != u_out.shape:
        raise ValueError(f"adapter inputs differ in shape: {u_in.shape} vs {u_out.shape}")
    pos = unified_positions(pz, px)
    if pos.shape != u_out.shape:
        raise ValueError(f"position embeddings {pos.shape} do not match tokens {u_out.shape}")
    q_src = layer_norm(u_out, p["ln_q.g"], p["ln_q.b"]) + pos
    kv_src = layer_norm(u_in, p["ln_kv.g"], p["ln_kv.b"]) + pos
    a = u_out + cross_attention(q_src, kv_src, p, n_heads)
    out = a + mlp(layer_norm(a, p["ln_ffn.g"], p["ln_ffn.b"]), p, "ffn.")
    return _check_finite(out, "adapter block")


def embed_inputs(zf, xf, zv, xv, params: ModelParams) -> np.ndarray:
    return unify(
        project_frame_tokens(zf, params, "z"),
        project_frame_tokens(xf, params, "x"),
        project_voxel_tokens(zv, params, "z"),
        project_voxel_tokens(xv, params, "x"),
        params["pos.z"], params["pos.x"],
    )


def forward_backbone(inputs, params: ModelParams) -> np.ndarray:
    """``inputs = (template crop, search crop, template voxels, search voxels)``."""
    u = embed_inputs(*inputs, params)
    return run_layers(u, params)


def run_layers(u: np.ndarray, params: ModelParams) -> np.ndarray:
    cfg = params.config
    pz, px = params["pos.z"], params["pos.x"]
    for i in range(cfg.n_layers):
        out = transformer_block(u, params.sub(f"block{i}."), cfg.n_heads)
        u = adapter_block(u, out, params.sub(f"adapter{i}."), pz, px, cfg.n_heads)
    return u


# --- head ------------------------------------------------------------------


@dataclass
class HeadOutput:
    score: np.ndarray  # (s, s)
    offset: np.ndarray  # (s, s, 2): x, y
    size: np.ndarray  # (s, s, 2): w, h

    @property
    def map_size(self) -> int:
        return self.score.shape[0]


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1, zero-padded 3x3 convolution. ``x`` (H, W, Cin), ``w`` (3, 3, Cin, Cout)."""
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))  # H, W, Cin, 3, 3
    return np.tensordot(win, w.transpose(2, 0, 1, 3), axes=([2, 3, 4], [0, 1, 2])) + b


def head_branch(feat: np.ndarray, p: Mapping[str, np.ndarray], branch: str) -> np.ndarray:
    h = feat
    for k in range(HEAD_STAGES):
        s = f"{branch}.stage{k}."
        h = conv3x3(h, p[s + "conv.w"], p[s + "conv.b"])
        h = np.maximum(h * p[s + "norm.scale"] + p[s + "norm.shift"], 0.0)
    return sigmoid(h @ p[f"{branch}.final.w"] + p[f"{branch}.final.b"])


def search_feature_map(u: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    if u.shape[0] != cfg.seq_len:
        raise ValueError(f"expected {cfg.seq_len} unified tokens, got {u.shape[0]}")
    nz, nx = cfg.n_z, cfg.n_x
    frame_x = u[nz:nz + nx]
    voxel_x = u[2 * nz + nx:]
    s = cfg.map_size
    return ((frame_x + voxel_x) / 2.0).reshape(s, s, u.shape[1])


def tracking_head(u: np.ndarray, params: ModelParams) -> HeadOutput:
    feat = search_feature_map(u, params.config)
    p = params.sub("head.")
    return HeadOutput(
        score=head_branch(feat, p, "score")[..., 0],
        offset=head_branch(feat, p, "offset"),
        size=head_branch(feat, p, "size"),
    )


def decode_box(head: HeadOutput, region: Region) -> BBox:
    """Peak cell (first in row-major order on ties) plus its offset and size, in sensor pixels."""
    s = head.map_size
    i, j = np.unravel_index(int(np.argmax(head.score)), head.score.shape)
    ncx = (j + head.offset[i, j, 0]) / s
    ncy = (i + head.offset[i, j, 1]) / s
    w = float(head.size[i, j, 0]) * region.side_w
    h = float(head.size[i, j, 1]) * region.side_h
    cx = region.left + float(ncx) * region.side_w
    cy = region.top + float(ncy) * region.side_h
    return BBox.from_center(cx, cy, w, h)
