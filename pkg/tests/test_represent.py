import numpy as np
import pytest

from conftest import random_window
from evtrack.event_io import EventWindow, make_events
from evtrack.oracles import naive_blend, naive_event_frame, naive_time_surface
from evtrack.represent import (
    blend_early_fusion, crop_resize, polarity_counts, read_pnm, render_event_frame, render_time_surface, to_rgb,
    write_pnm,
)
from evtrack.voxel import Region


def test_event_frame_matches_loop(rng):
    w = random_window(rng, 400, sensor=(30, 20))
    np.testing.assert_allclose(render_event_frame(w, 30, 20), naive_event_frame(w.events, 30, 20), atol=1e-9)


def test_event_frame_empty():
    w = EventWindow(make_events([], [], [], []), 0, 10, 5, 4)
    img = render_event_frame(w, 5, 4)
    assert img.shape == (4, 5, 3) and not img.any()


def test_event_frame_channels():
    w = EventWindow(make_events([1, 2, 3], [0, 0, 1], [0, 0, 0], [1, 1, -1]), 0, 10, 2, 1)
    img = render_event_frame(w, 2, 1)
    assert img[0, 0, 0] == 255 and img[0, 1, 2] == 127.5
    assert not img[..., 1].any()


def test_time_surface_matches_loop(rng):
    w = random_window(rng, 400, sensor=(30, 20))
    for tau in (None, 1000.0):
        ref_tau = w.duration / 2 if tau is None else tau
        np.testing.assert_allclose(render_time_surface(w, 30, 20, tau),
                                   naive_time_surface(w.events, 30, 20, w.t_end, ref_tau), atol=1e-12)


def test_time_surface_range(rng):
    s = render_time_surface(random_window(rng, 1000, sensor=(30, 20)), 30, 20)
    assert (s >= 0).all() and (s <= 1).all()


def test_time_surface_bad_tau(rng):
    with pytest.raises(ValueError):
        render_time_surface(random_window(rng, 3, sensor=(5, 5)), 5, 5, 0.0)


def test_blend_zero_color():
    ev = np.full((2, 2, 3), 255.0)
    np.testing.assert_array_equal(blend_early_fusion(np.zeros((2, 2, 3)), ev), np.full((2, 2, 3), 42.5))


def test_blend_matches_loop(rng):
    color = rng.uniform(0, 255, (8, 9, 3))
    ev = rng.uniform(0, 255, (8, 9, 3))
    np.testing.assert_allclose(blend_early_fusion(color, ev), naive_blend(color, ev), atol=1e-9)


def test_blend_without_events_scales_color(rng):
    # the 1.2 normalization applies even where no event fired
    color = rng.uniform(0, 255, (4, 4, 3))
    np.testing.assert_allclose(blend_early_fusion(color, np.zeros_like(color)), color / 1.2)


def test_blend_shape_mismatch():
    with pytest.raises(ValueError):
        blend_early_fusion(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_to_rgb():
    assert to_rgb(np.zeros((3, 4))).shape == (3, 4, 3)


def test_crop_resize_identity(rng):
    img = rng.uniform(0, 255, (16, 16, 3))
    out = crop_resize(img, Region(8.0, 8.0, 16.0, 16.0), 16)
    np.testing.assert_allclose(out, img)


def test_crop_resize_zero_outside():
    img = np.full((10, 10), 100.0)
    out = crop_resize(img, Region(0.0, 0.0, 10.0, 10.0), 10)
    assert out[0, 0] == 0 and out[-1, -1] == 100


def test_crop_resize_downsample_constant():
    img = np.full((20, 20, 3), 7.0)
    out = crop_resize(img, Region(10.0, 10.0, 16.0, 16.0), 4)
    np.testing.assert_allclose(out, 7.0)


def test_pnm_roundtrip(tmp_path, rng):
    rgb = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
    gray = rng.integers(0, 256, (5, 7)).astype(np.uint8)
    write_pnm(tmp_path / "a.ppm", rgb)
    write_pnm(tmp_path / "b.pgm", gray)
    assert np.array_equal(read_pnm(tmp_path / "a.ppm"), rgb)
    assert np.array_equal(read_pnm(tmp_path / "b.pgm"), gray)


def test_pnm_rounds_floats(tmp_path):
    write_pnm(tmp_path / "c.pgm", np.array([[0.4, 0.5, 300.0, -2.0]]))
    assert read_pnm(tmp_path / "c.pgm").tolist() == [[0, 1, 255, 0]]


def test_single_positive_event_pixel():
    w = EventWindow(make_events([5], [3], [4], [1]), 0, 10, 8, 6)
    img = render_event_frame(w, 8, 6)
    assert img[4, 3, 0] == 255
    img[4, 3, 0] = 0
    assert not img.any()


def test_counts_conserved(rng):
    w = random_window(rng, 700, sensor=(20, 10))
    c = polarity_counts(w, 20, 10)
    assert c[..., 0].sum() == (w.events["p"] > 0).sum()
    assert c[..., 1].sum() == (w.events["p"] < 0).sum()


def test_time_surface_event_at_end_is_one():
    w = EventWindow(make_events([100], [1], [1], [-1]), 0, 100, 4, 4)
    s = render_time_surface(w, 4, 4)
    assert s[1, 1, 1] == 1.0 and s.sum() == 1.0


def test_time_surface_uses_latest_event():
    w = EventWindow(make_events([10, 60], [2, 2], [0, 0], [1, 1]), 0, 100, 4, 4)
    assert render_time_surface(w, 4, 4, 50.0)[0, 2, 0] == pytest.approx(np.exp(-40 / 50))


def test_time_surface_monotone_in_age():
    w = EventWindow(make_events([10, 20, 30], [0, 1, 2], [0, 0, 0], [1, 1, 1]), 0, 100, 4, 1)
    row = render_time_surface(w, 4, 1)[0, :3, 0]
    assert row[0] < row[1] < row[2]


def test_blend_linear(rng):
    c1, c2, e1, e2 = (rng.uniform(0, 100, (3, 3, 3)) for _ in range(4))
    np.testing.assert_allclose(blend_early_fusion(c1 + c2, e1 + e2),
                               blend_early_fusion(c1, e1) + blend_early_fusion(c2, e2))
