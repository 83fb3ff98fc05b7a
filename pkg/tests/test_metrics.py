import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cats.autodiff import Tensor, grad_check
from cats.metrics import (
    MetricsReport,
    asd,
    dice_loss,
    dice_score,
    evaluate_case,
    extract_surface,
    hd95,
    one_hot,
    surface_distances,
)


def brute_surface(mask, spacing=(1.0, 1.0, 1.0)):
    pts = []
    shape = mask.shape
    for idx in zip(*np.nonzero(mask)):
        for ax in range(3):
            for d in (-1, 1):
                n = list(idx)
                n[ax] += d
                if not 0 <= n[ax] < shape[ax] or not mask[tuple(n)]:
                    pts.append(idx)
                    break
            else:
                continue
            break
    return np.array(pts, dtype=float).reshape(-1, 3) * np.asarray(spacing)


def brute_distances(a, b, spacing=(1.0, 1.0, 1.0)):
    sa, sb = brute_surface(a, spacing), brute_surface(b, spacing)
    d = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(-1))
    return np.concatenate([d.min(1), d.min(0)])


def cube(n, size, lo):
    m = np.zeros((size,) * 3, bool)
    m[lo:lo + n, lo:lo + n, lo:lo + n] = True
    return m


@pytest.mark.parametrize("n,expected", [(3, 26), (4, 56), (1, 1)])
def test_cube_surface_counts(n, expected):
    assert len(extract_surface(cube(n, 8, 2))) == expected


def test_surface_on_grid_border():
    m = np.ones((3, 3, 3), bool)
    assert len(extract_surface(m)) == 26


def test_surface_spacing_scales_coordinates():
    m = cube(2, 4, 1)
    np.testing.assert_allclose(extract_surface(m, (2.0, 1.0, 0.5)),
                               extract_surface(m) * [2.0, 1.0, 0.5])


def test_random_masks_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(40):
        a = rng.random((8, 8, 8)) < 0.3
        b = rng.random((8, 8, 8)) < 0.3
        spacing = tuple(rng.uniform(0.5, 2.0, 3))
        ref = brute_distances(a, b, spacing)
        assert abs(asd(a, b, spacing) - ref.mean()) < 1e-9
        assert abs(hd95(a, b, spacing) - np.percentile(ref, 95)) < 1e-9
        inter = np.logical_and(a, b).sum()
        assert abs(dice_score(a, b, None) - 2 * inter / (a.sum() + b.sum())) < 1e-12


def test_identical_masks_zero_distance():
    m = cube(3, 8, 2)
    assert dice_score(m, m, None) == 1.0
    assert asd(m, m) == 0.0
    assert hd95(m, m) == 0.0


def test_shifted_cube_distances():
    a, b = cube(4, 10, 2), cube(4, 10, 3)
    d = surface_distances(a, b)
    assert d.max() <= math.sqrt(3) + 1e-12
    assert dice_score(a, b, None) == pytest.approx(2 * 27 / 128)


def test_empty_masks():
    e = np.zeros((4, 4, 4), bool)
    f = cube(2, 4, 1)
    assert dice_score(e, e, None) == 1.0
    assert dice_score(e, f, None) == 0.0
    assert math.isnan(asd(e, f)) and math.isnan(hd95(f, e))


def test_dice_extent_mismatch():
    with pytest.raises(ValueError, match="extent"):
        dice_score(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 6, 6)) < 0.4, rng.random((6, 6, 6)) < 0.4
    if not a.any() or not b.any():
        return
    assert dice_score(a, b, None) == dice_score(b, a, None)
    assert asd(a, b) == pytest.approx(asd(b, a), abs=1e-12)
    assert hd95(a, b) == pytest.approx(hd95(b, a), abs=1e-12)


def test_flip_invariance():
    rng = np.random.default_rng(3)
    a, b = rng.random((7, 7, 7)) < 0.4, rng.random((7, 7, 7)) < 0.4
    for ax in range(3):
        fa, fb = np.flip(a, ax), np.flip(b, ax)
        assert asd(fa, fb) == pytest.approx(asd(a, b), abs=1e-12)
        assert hd95(fa, fb) == pytest.approx(hd95(a, b), abs=1e-12)


def test_one_hot_and_range():
    oh = one_hot(np.array([[0, 2, 1]]), 3)
    assert oh.shape == (1, 3, 3)
    np.testing.assert_array_equal(oh[0].argmax(0), [0, 2, 1])
    with pytest.raises(ValueError, match="out of range"):
        one_hot(np.array([3]), 3)


def test_dice_loss_confident_correct_is_small():
    rng = np.random.default_rng(0)
    labels = (rng.random((2, 4, 4, 4)) < 0.5).astype(int)
    logits = np.where(one_hot(labels, 2) > 0, 10.0, -10.0)
    assert dice_loss(Tensor(logits), labels).item() < 0.01


def test_dice_loss_uniform_balanced_half():
    labels = np.zeros((1, 4, 4, 4), int)
    labels[:, :2] = 1
    loss = dice_loss(Tensor(np.zeros((1, 2, 4, 4, 4))), labels).item()
    assert loss == pytest.approx(0.5, abs=1e-5)


def test_dice_loss_range_and_shape_check():
    rng = np.random.default_rng(1)
    for _ in range(5):
        v = dice_loss(Tensor(rng.standard_normal((2, 3, 4, 4, 4)) * 4),
                      rng.integers(0, 3, (2, 4, 4, 4))).item()
        assert 0.0 <= v <= 1.0
    with pytest.raises(ValueError, match="does not match"):
        dice_loss(Tensor(np.zeros((1, 2, 4, 4, 4))), np.zeros((1, 4, 4, 5), int))


def test_dice_loss_gradcheck():
    rng = np.random.default_rng(2)
    logits = Tensor(rng.standard_normal((2, 3, 3, 3, 3)))
    labels = rng.integers(0, 3, (2, 3, 3, 3))
    assert grad_check(lambda: dice_loss(logits, labels), [logits]) < 1e-6


def test_report_roundtrip_and_summary():
    rng = np.random.default_rng(4)
    truth = rng.integers(0, 3, (8, 8, 8))
    pred = truth.copy()
    pred[:2] = 0
    recs = evaluate_case("c1", pred, truth, [1, 2]) + evaluate_case("c2", truth, truth, [1, 2])
    report = MetricsReport(recs, {1: "liver", 2: "spleen"})
    back = MetricsReport.from_tsv(report.to_tsv())
    assert back.cases == ["c1", "c2"] and back.classes == [1, 2]
    for a, b in zip(report.records, back.records):
        assert a == b
    s = report.summary()
    assert s["dice"][1][0] == pytest.approx((recs[0].dice + 1.0) / 2)
    assert 0 < report.mean_foreground_dice() < 1


def test_evaluate_case_flags():
    t = np.zeros((4, 4, 4), int)
    p = np.zeros((4, 4, 4), int)
    p[1, 1, 1] = 1
    recs = evaluate_case("x", p, t, [1, 2])
    assert [r.flag for r in recs] == ["truth_empty", "both_empty"]
    assert recs[1].dice == 1.0 and math.isnan(recs[1].asd_mm)
    with pytest.raises(ValueError, match="extent"):
        evaluate_case("x", p, np.zeros((4, 4, 5), int), [1])
