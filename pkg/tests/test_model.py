import numpy as np
import pytest

from evtrack import oracles
from evtrack.model import (
    HeadOutput, ModelConfig, ModelParams, adapter_block, attention, conv3x3, decode_box, embed_inputs,
    forward_backbone, gelu, layer_norm, param_shapes, patchify, project_frame_tokens, project_voxel_tokens,
    softmax, tracking_head, transformer_block, unified_positions, unify,
)
from evtrack.selftest import random_block_params, toy_config
from evtrack.voxel import ROW_WIDTH, Region


def small_inputs(cfg, rng):
    return (rng.uniform(0, 255, (cfg.template_px, cfg.template_px, 3)),
            rng.uniform(0, 255, (cfg.search_px, cfg.search_px, 3)),
            rng.uniform(0, 1, (cfg.template_topk, ROW_WIDTH)),
            rng.uniform(0, 1, (cfg.search_topk, ROW_WIDTH)))


# --- config and parameters -------------------------------------------------

def test_default_sequence_length():
    cfg = ModelConfig()
    assert (cfg.n_z, cfg.n_x, cfg.seq_len, cfg.map_size) == (64, 256, 640, 16)
    assert (cfg.template_grid, cfg.search_grid) == (32, 64)


@pytest.mark.parametrize("kw", [dict(width=10, n_heads=4), dict(template_px=100), dict(search_topk=4000),
                                dict(template_topk=256)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_param_names():
    names = param_shapes(toy_config(n_layers=2))
    assert "block1.attn.qkv.w" in names and "adapter1.attn.q.w" in names
    assert names["proj.frame_x.w"] == (16 * 16 * 3, 8)
    assert names["proj.voxel_z.w"] == (4 * 4 * ROW_WIDTH, 8)
    assert names["pos.z"] == (64, 8) and names["pos.x"] == (256, 8)
    assert names["head.score.final.w"] == (8, 1)


def test_init_deterministic_and_seeded():
    a = ModelParams.init(toy_config(), seed=3)
    b = ModelParams.init(toy_config(), seed=3)
    c = ModelParams.init(toy_config(), seed=4)
    assert a.to_bytes() == b.to_bytes() != c.to_bytes()
    assert (a["block0.ln1.g"] == 1).all() and (a["block0.attn.qkv.b"] == 0).all()


def test_params_roundtrip(tmp_path):
    p = ModelParams.init(toy_config(), seed=1)
    q = ModelParams.from_bytes(p.to_bytes())
    assert q.config == p.config
    assert all(np.array_equal(p[k], q[k]) for k in p)
    p.save(tmp_path / "m.bin")
    assert ModelParams.load(tmp_path / "m.bin").to_bytes() == p.to_bytes()


def test_params_read_only():
    p = ModelParams.init(toy_config())
    with pytest.raises(ValueError):
        p["pos.z"][0, 0] = 1.0


def test_params_shape_checked():
    p = ModelParams.init(toy_config())
    with pytest.raises(ValueError):
        p.replaced(pos__z=np.zeros((3, 3)))
    with pytest.raises(ValueError):
        ModelParams(toy_config(), {})


def test_replaced():
    p = ModelParams.init(toy_config())
    q = p.replaced(pos__z=np.ones((64, 8)))
    assert (q["pos.z"] == 1).all() and not (p["pos.z"] == 1).all()


# --- primitives ------------------------------------------------------------

def test_layer_norm_matches_loop(rng):
    x = rng.normal(size=(5, 8))
    g, b = rng.normal(size=8), rng.normal(size=8)
    np.testing.assert_allclose(layer_norm(x, g, b), oracles.naive_layer_norm(x, g, b), atol=1e-12)


def test_gelu_matches_erf(rng):
    x = rng.normal(size=50) * 3
    np.testing.assert_allclose(gelu(x), oracles.naive_gelu(x), atol=1e-14)


def test_softmax_stable():
    out = softmax(np.array([[1000.0, 1000.0], [-1000.0, 0.0]]))
    np.testing.assert_allclose(out.sum(axis=1), 1.0)
    assert np.isfinite(out).all()


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_attention_matches_loop(rng, heads):
    q, k, v = rng.normal(size=(6, 8)), rng.normal(size=(9, 8)), rng.normal(size=(9, 8))
    out, w = attention(q, k, v, heads, return_weights=True)
    ref, ref_w = oracles.naive_attention(q, k, v, heads)
    np.testing.assert_allclose(out, ref, atol=1e-12)
    np.testing.assert_allclose(w, ref_w, atol=1e-12)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_transformer_block_matches_loop(rng):
    cfg = toy_config()
    p = random_block_params(cfg, rng, "block")
    u = rng.normal(size=(12, 8))
    np.testing.assert_allclose(transformer_block(u, p, 2), oracles.naive_transformer_block(u, p, 2), atol=1e-10)


def test_adapter_matches_loop(rng):
    cfg = toy_config()
    p = random_block_params(cfg, rng, "adapter")
    u_in, u_out = rng.normal(size=(640, 8)), rng.normal(size=(640, 8))
    pz, px = rng.normal(size=(64, 8)), rng.normal(size=(256, 8))
    got = adapter_block(u_in, u_out, p, pz, px, 2)
    pos = unified_positions(pz, px)
    full = oracles.naive_adapter_block(u_in, u_out, p, pos, 2)
    np.testing.assert_allclose(got, full, atol=1e-10)


def test_zero_weights_are_identity(rng):
    cfg = toy_config()
    p = random_block_params(cfg, rng, "block")
    p["attn.out.w"][:] = 0
    p["attn.out.b"][:] = 0
    p["mlp.fc2.w"][:] = 0
    p["mlp.fc2.b"][:] = 0
    u = rng.normal(size=(10, 8))
    assert np.array_equal(transformer_block(u, p, 2), u)

    a = random_block_params(cfg, rng, "adapter")
    for key in ("attn.out.w", "attn.out.b", "ffn.fc2.w", "ffn.fc2.b"):
        a[key][:] = 0
    u_in, u_out = rng.normal(size=(640, 8)), rng.normal(size=(640, 8))
    pz, px = rng.normal(size=(64, 8)), rng.normal(size=(256, 8))
    assert np.array_equal(adapter_block(u_in, u_out, a, pz, px, 2), u_out)


def test_non_finite_raises(rng):
    p = random_block_params(toy_config(), rng, "block")
    u = rng.normal(size=(4, 8))
    u[0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        transformer_block(u, p, 2)


# --- tokens ----------------------------------------------------------------

def test_patchify_layout():
    img = np.arange(4 * 4 * 1, dtype=float).reshape(4, 4, 1)
    t = patchify(img, 2)
    assert t[0].tolist() == [0, 1, 4, 5]
    assert t[1].tolist() == [2, 3, 6, 7]


def test_frame_projection_matches_loop(rng):
    params = ModelParams.init(toy_config(), seed=0)
    img = rng.uniform(0, 1, (128, 128, 3))
    got = project_frame_tokens(img, params, "z")
    ref = oracles.naive_patch_projection(img, params["proj.frame_z.w"], params["proj.frame_z.b"], 16)
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_voxel_projection_shape(rng):
    params = ModelParams.init(toy_config(), seed=0)
    assert project_voxel_tokens(rng.uniform(size=(4096, ROW_WIDTH)), params, "x").shape == (256, 8)
    with pytest.raises(ValueError):
        project_voxel_tokens(np.zeros((100, ROW_WIDTH)), params, "x")


def test_unify_order(rng):
    pz, px = np.zeros((64, 8)), np.zeros((256, 8))
    parts = [np.full((64, 8), 1.0), np.full((256, 8), 2.0), np.full((64, 8), 3.0), np.full((256, 8), 4.0)]
    u = unify(*parts, pz, px)
    assert u.shape == (640, 8)
    assert (u[:64] == 1).all() and (u[64:320] == 2).all() and (u[320:384] == 3).all() and (u[384:] == 4).all()


def test_unify_adds_positions(rng):
    pz, px = rng.normal(size=(64, 8)), rng.normal(size=(256, 8))
    z, x = np.zeros((64, 8)), np.zeros((256, 8))
    np.testing.assert_array_equal(unify(z, x, z, x, pz, px), unified_positions(pz, px))


def test_embed_sequence_length(rng):
    cfg = toy_config()
    params = ModelParams.init(cfg)
    assert embed_inputs(*small_inputs(cfg, rng), params).shape == (640, 8)


# --- head ------------------------------------------------------------------

def test_conv3x3_matches_loop(rng):
    x = rng.normal(size=(5, 6, 3))
    w, b = rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4)
    np.testing.assert_allclose(conv3x3(x, w, b), oracles.naive_conv3x3(x, w, b), atol=1e-12)


@pytest.mark.parametrize("width", [8, 64])
def test_forward_shapes(rng, width):
    cfg = toy_config(width=width, n_heads=2)
    params = ModelParams.init(cfg, seed=0)
    u = forward_backbone(small_inputs(cfg, rng), params)
    assert u.shape == (640, width)
    head = tracking_head(u, params)
    assert head.score.shape == (16, 16)
    assert head.offset.shape == (16, 16, 2) and head.size.shape == (16, 16, 2)
    for m in (head.score, head.offset, head.size):
        assert ((m > 0) & (m < 1)).all()


def test_decode_matches_brute_force(rng):
    region = Region(100.0, 80.0, 64.0, 48.0)
    for _ in range(20):
        head = HeadOutput(rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16, 2)), rng.uniform(size=(16, 16, 2)))
        box = decode_box(head, region)
        cx, cy, w, h = oracles.brute_force_decode(head.score, head.offset, head.size,
                                                  region.left, region.top, region.side_w, region.side_h)
        np.testing.assert_allclose([box.cx, box.cy, box.w, box.h], [cx, cy, w, h], atol=1e-9)


def test_decode_tie_takes_first_row_major():
    score = np.zeros((4, 4))
    score[2, 1] = score[1, 3] = 1.0
    head = HeadOutput(score, np.zeros((4, 4, 2)), np.full((4, 4, 2), 0.25))
    box = decode_box(head, Region(2.0, 2.0, 4.0, 4.0))
    assert (box.cx, box.cy) == (3.0, 1.0)


# --- spec examples and invariants -------------------------------------------

def test_zero_projection_gives_zero_tokens():
    params = ModelParams.zeros(toy_config())
    assert not project_frame_tokens(np.zeros((128, 128, 3)), params, "z").any()
    assert not project_voxel_tokens(np.zeros((1024, ROW_WIDTH)), params, "z").any()
    assert project_frame_tokens(np.zeros((128, 128, 3)), params, "z").shape == (64, 8)


def test_voxel_inputs_only_touch_voxel_positions(rng):
    cfg = toy_config()
    params = ModelParams.init(cfg)
    a = small_inputs(cfg, rng)
    b = (a[0], a[1], rng.uniform(size=a[2].shape), rng.uniform(size=a[3].shape))
    ua, ub = embed_inputs(*a, params), embed_inputs(*b, params)
    assert np.array_equal(ua[:320], ub[:320])
    assert not np.isclose(ua[320:], ub[320:]).all(axis=1).any()


def test_single_token_attention_weight_one(rng):
    q, k, v = rng.normal(size=(1, 8)), rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    out, w = attention(q, k, v, 2, return_weights=True)
    assert (w == 1.0).all()
    np.testing.assert_array_equal(out, v)


def test_adapter_degenerates_to_self_attention(rng):
    cfg = toy_config()
    p = random_block_params(cfg, rng, "adapter")
    u = rng.normal(size=(640, 8))
    zero_z, zero_x = np.zeros((64, 8)), np.zeros((256, 8))
    got = adapter_block(u, u, p, zero_z, zero_x, 2)
    q_src = layer_norm(u, p["ln_q.g"], p["ln_q.b"])
    kv_src = layer_norm(u, p["ln_kv.g"], p["ln_kv.b"])
    q = q_src @ p["attn.q.w"] + p["attn.q.b"]
    k = kv_src @ p["attn.k.w"] + p["attn.k.b"]
    v = kv_src @ p["attn.v.w"] + p["attn.v.b"]
    att, _ = oracles.naive_attention(q, k, v, 2)
    a = u + att @ p["attn.out.w"] + p["attn.out.b"]
    ref = a + oracles.naive_mlp(layer_norm(a, p["ln_ffn.g"], p["ln_ffn.b"]), p, "ffn.")
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_zero_model_backbone_is_identity_on_tokens(rng):
    cfg = toy_config(n_layers=2)
    params = ModelParams.zeros(cfg)
    inputs = small_inputs(cfg, rng)
    u0 = embed_inputs(*inputs, params)
    assert not u0.any()
    assert not forward_backbone(inputs, params).any()


def test_one_layer_equals_hand_composition(rng):
    cfg = toy_config()
    params = ModelParams.init(cfg, seed=2)
    inputs = small_inputs(cfg, rng)
    u = embed_inputs(*inputs, params)
    mid = oracles.naive_transformer_block(u, params.sub("block0."), 2)
    pos = unified_positions(params["pos.z"], params["pos.x"])
    ref = oracles.naive_adapter_block(u, mid, params.sub("adapter0."), pos, 2)
    np.testing.assert_allclose(forward_backbone(inputs, params), ref, atol=1e-9)


def test_permutation_equivariance(rng):
    p = random_block_params(toy_config(), rng, "block")
    u = rng.normal(size=(12, 8))
    perm = rng.permutation(12)
    np.testing.assert_allclose(transformer_block(u[perm], p, 2), transformer_block(u, p, 2)[perm], atol=1e-12)


def test_zero_head_scores_half(rng):
    cfg = toy_config()
    params = ModelParams.zeros(cfg)
    head = tracking_head(np.ones((640, 8)), params)
    assert (head.score == 0.5).all() and (head.offset == 0.5).all()


def test_decode_arithmetic():
    score = np.zeros((16, 16))
    score[0, 0] = 1.0
    head = HeadOutput(score, np.zeros((16, 16, 2)), np.full((16, 16, 2), 0.5))
    region = Region(100.0, 100.0, 64.0, 64.0)
    box = decode_box(head, region)
    assert (box.cx, box.cy) == (region.left, region.top)
    assert (box.w, box.h) == (32.0, 32.0)


def test_decode_uniform_picks_first_cell():
    head = HeadOutput(np.full((16, 16), 0.3), np.zeros((16, 16, 2)), np.full((16, 16, 2), 0.25))
    box = decode_box(head, Region(32.0, 32.0, 64.0, 64.0))
    assert (box.cx, box.cy) == (0.0, 0.0)


def test_decode_invariant_to_score_shift(rng):
    head = HeadOutput(rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16, 2)), rng.uniform(size=(16, 16, 2)))
    shifted = HeadOutput(head.score + 3.0, head.offset, head.size)
    region = Region(50.0, 50.0, 40.0, 40.0)
    assert decode_box(head, region) == decode_box(shifted, region)
