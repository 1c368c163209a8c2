import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evtrack import oracles
from evtrack.loss import (
    LossWeights, box_iou, center_cell, focal_loss, gaussian_target, giou_loss, l1_loss, total_loss,
)
from evtrack.model import HeadOutput
from evtrack.selftest import random_box, random_head, random_inside_box


def test_gaussian_peak_on_center_cell():
    t = gaussian_target(np.array([0.53, 0.21, 0.3, 0.2]))
    i, j = center_cell(0.53, 0.21, 16)
    assert (i, j) == (3, 8)
    assert t[i, j] == 1.0
    assert (t == 1.0).sum() == 1
    assert (t > 0).all() and (t <= 1).all()


def test_gaussian_sigma_from_radius():
    # box side 0.5 -> radius 2 cells -> sigma 5/6
    t = gaussian_target(np.array([0.5, 0.5, 0.5, 0.5]))
    sigma = 5 / 6
    assert t[8, 9] == pytest.approx(np.exp(-1 / (2 * sigma ** 2)))


def test_gaussian_minimum_radius():
    # a tiny box still gets radius 1 -> sigma 0.5
    t = gaussian_target(np.array([0.5, 0.5, 0.01, 0.01]))
    assert t[8, 9] == pytest.approx(np.exp(-2.0))


def test_focal_confident_prediction_near_zero():
    target = gaussian_target(np.array([0.5, 0.5, 0.3, 0.3]))
    pred = np.where(target == 1.0, 1 - 1e-6, 1e-6)
    assert focal_loss(pred, target)[0] < 1e-9


def test_focal_rejects_saturated():
    with pytest.raises(ValueError):
        focal_loss(np.zeros((2, 2)), np.ones((2, 2)))


def test_focal_binary_flag_changes_negatives(rng):
    target = gaussian_target(np.array([0.5, 0.5, 0.3, 0.3]))
    pred = rng.uniform(0.05, 0.95, target.shape)
    assert focal_loss(pred, target, binary=True)[0] > focal_loss(pred, target)[0]


def test_focal_gradient(rng):
    target = gaussian_target(random_inside_box(rng))
    pred = rng.uniform(0.05, 0.95, target.shape)
    _, g = focal_loss(pred, target)
    fd = oracles.central_diff(lambda p: focal_loss(p, target)[0], pred, h=1e-4)
    assert oracles.rel_error(g, fd) < 1e-4


def test_l1_gradient(rng):
    gt, pred = random_box(rng), random_box(rng)
    v, g = l1_loss(gt, pred)
    assert v == pytest.approx(np.abs(gt - pred).mean())
    fd = oracles.central_diff(lambda p: l1_loss(gt, p)[0], pred)
    assert oracles.rel_error(g, fd) < 1e-6


def test_giou_identical_is_zero():
    b = np.array([0.5, 0.5, 0.2, 0.3])
    v, g = giou_loss(b, b)
    assert v == pytest.approx(0.0, abs=1e-15)


def test_giou_disjoint_above_one():
    v, _ = giou_loss(np.array([0.1, 0.1, 0.1, 0.1]), np.array([0.9, 0.9, 0.1, 0.1]))
    assert 1.0 < v < 2.0


def test_giou_degenerate_box():
    with pytest.raises(ValueError):
        giou_loss(np.array([0.5, 0.5, 0.2, 0.2]), np.array([0.5, 0.5, 0.0, 0.2]))


def test_giou_gradient(rng):
    for _ in range(20):
        gt, pred = random_box(rng), random_box(rng)
        _, g = giou_loss(gt, pred)
        fd = oracles.central_diff(lambda p: giou_loss(gt, p)[0], pred, h=1e-7)
        assert oracles.rel_error(g, fd) < 1e-4


coord = st.floats(0.1, 0.9)
side = st.floats(0.02, 0.2)


@settings(max_examples=200, deadline=None)
@given(coord, coord, side, side, coord, coord, side, side)
def test_giou_range_and_iou_link(ax, ay, aw, ah, bx, by, bw, bh):
    a, b = np.array([ax, ay, aw, ah]), np.array([bx, by, bw, bh])
    v, _ = giou_loss(a, b)
    assert 0.0 <= v < 2.0
    assert v >= 1.0 - box_iou(a, b) - 1e-12
    assert giou_loss(b, a)[0] == pytest.approx(v)


def test_iou_matches_raster(rng):
    for _ in range(20):
        a, b = random_inside_box(rng), random_inside_box(rng)
        assert box_iou(a, b) == pytest.approx(oracles.raster_iou(a, b), abs=1e-9)


def test_total_parts_and_weights(rng):
    head = random_head(rng)
    gt = np.array([0.41, 0.63, 0.2, 0.15])
    res = total_loss(head, gt)
    assert set(res.parts) == {"focal", "l1", "giou"}
    assert res.value == pytest.approx(sum(res.parts.values()))
    doubled = total_loss(head, gt, LossWeights(2, 2, 28))
    assert doubled.value == pytest.approx(2 * res.value)
    np.testing.assert_allclose(doubled.grad.size, 2 * res.grad.size)


def test_total_box_gradient_only_at_center_cell(rng):
    head = random_head(rng)
    gt = np.array([0.41, 0.63, 0.2, 0.15])
    res = total_loss(head, gt)
    i, j = center_cell(gt[0], gt[1], 16)
    mask = np.ones((16, 16), bool)
    mask[i, j] = False
    assert not res.grad.offset[mask].any() and not res.grad.size[mask].any()
    assert res.grad.size[i, j].any()


def test_total_gradient_fd(rng):
    head = random_head(rng, s=8)
    gt = np.array([0.43, 0.57, 0.3, 0.2])
    res = total_loss(head, gt)
    flat = np.concatenate([head.score.ravel(), head.offset.ravel(), head.size.ravel()])

    def f(v):
        h = HeadOutput(v[:64].reshape(8, 8), v[64:192].reshape(8, 8, 2), v[192:].reshape(8, 8, 2))
        return total_loss(h, gt).value

    fd = oracles.central_diff(f, flat, h=1e-7)
    analytic = np.concatenate([res.grad.score.ravel(), res.grad.offset.ravel(), res.grad.size.ravel()])
    assert oracles.rel_error(analytic, fd) < 1e-4


def test_total_rejects_center_outside(rng):
    with pytest.raises(ValueError):
        total_loss(random_head(rng), np.array([1.2, 0.5, 0.1, 0.1]))


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1)


def test_l1_worked_example():
    v, _ = l1_loss(np.array([0.5, 0.5, 0.2, 0.2]), np.array([0.5, 0.5, 0.2, 0.4]))
    assert v == pytest.approx(0.05, abs=1e-15)


def test_giou_far_apart_approaches_two():
    near = giou_loss(np.array([0.0, 0.0, 0.01, 0.01]), np.array([1.0, 1.0, 0.01, 0.01]))[0]
    far = giou_loss(np.array([0.0, 0.0, 0.01, 0.01]), np.array([100.0, 100.0, 0.01, 0.01]))[0]
    assert near < far < 2.0
    assert far == pytest.approx(2.0, abs=1e-6)


def test_focal_invariant_to_cell_permutation(rng):
    target = gaussian_target(np.array([0.4, 0.6, 0.3, 0.2]))
    pred = rng.uniform(0.05, 0.95, target.shape)
    perm = rng.permutation(target.size)
    shuffled = focal_loss(pred.ravel()[perm].reshape(16, 16), target.ravel()[perm].reshape(16, 16))[0]
    assert shuffled == pytest.approx(focal_loss(pred, target)[0], rel=1e-12)


def test_perfect_head_total_near_zero():
    gt = np.array([0.53, 0.47, 0.25, 0.3])
    i, j = center_cell(gt[0], gt[1], 16)
    target = gaussian_target(gt)
    score = np.where(target == 1.0, 1 - 1e-7, 1e-7)
    offset = np.zeros((16, 16, 2))
    offset[i, j] = [gt[0] * 16 - j, gt[1] * 16 - i]
    size = np.broadcast_to(gt[2:], (16, 16, 2)).copy()
    res = total_loss(HeadOutput(score, offset, size), gt)
    assert res.value < 1e-9


def test_giou_weight_doubling_is_exact(rng):
    head = random_head(rng)
    gt = np.array([0.41, 0.63, 0.2, 0.15])
    a = total_loss(head, gt, LossWeights(1, 1, 14))
    b = total_loss(head, gt, LossWeights(1, 1, 28))
    assert b.parts["giou"] == 2 * a.parts["giou"]
    assert b.parts["focal"] == a.parts["focal"] and b.parts["l1"] == a.parts["l1"]


def test_giou_translation_invariant(rng):
    for _ in range(20):
        a, b = random_box(rng), random_box(rng)
        shift = np.array([*rng.uniform(-0.3, 0.3, 2), 0.0, 0.0])
        assert giou_loss(a + shift, b + shift)[0] == pytest.approx(giou_loss(a, b)[0], abs=1e-12)
