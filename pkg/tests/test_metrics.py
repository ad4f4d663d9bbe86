import math

import numpy as np
import pytest

from omega_seg.metrics import (
    THRESHOLDS, UndefinedMetric, bland_altman, class_weights, dice, evaluate_labels, failure_rate,
    iou, regress_params, success_curve, summarize, write_curve_csv, write_records_csv,
    write_summary_csv,
)

TOL = 1e-9


def _block(shift=0):
    m = np.zeros((6, 6), dtype=bool)
    m[2:4, 2 + shift:4 + shift] = True
    return m


def test_iou_fixtures():
    assert iou(_block(), _block()) == pytest.approx(1.0, abs=TOL)
    assert iou(_block(), _block(3)) == 0.0
    assert iou(_block(), _block(1)) == pytest.approx(2 / 6, abs=TOL)
    assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 0.0


def test_dice_fixtures():
    assert dice(_block(), _block()) == pytest.approx(1.0, abs=TOL)
    assert dice(_block(), _block(3)) == 0.0
    assert dice(_block(), _block(1)) == pytest.approx(0.5, abs=TOL)


def test_dice_iou_identity(rng):
    for _ in range(1000):
        a = rng.random((8, 8)) < rng.random()
        b = rng.random((8, 8)) < rng.random()
        j, d = iou(a, b), dice(a, b)
        assert 0.0 <= j <= d <= 1.0
        assert abs(d - 2 * j / (1 + j)) < TOL


def test_weighted_fg_iou_fixture():
    gt = np.zeros((4, 4), dtype=int)
    gt[0, :3] = 1
    gt[3, 3] = 2
    pred = np.zeros_like(gt)
    pred[0, :3] = 1
    rec = evaluate_labels("x", "SA", 0, gt, pred, (0, 1, 2, 3))
    assert rec.wfiou == pytest.approx(0.75, abs=TOL)
    assert evaluate_labels("x", "SA", 0, gt, gt, (0, 1, 2, 3)).wfiou == pytest.approx(1.0, abs=TOL)
    assert evaluate_labels("x", "SA", 0, gt, np.zeros_like(gt), (0, 1, 2, 3)).wfiou == 0.0


def test_weights_sum_to_one(rng):
    gt = rng.integers(0, 6, (16, 16))
    w = class_weights(gt, (1, 2, 3, 4, 5))
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_no_foreground_is_undefined():
    with pytest.raises(UndefinedMetric):
        evaluate_labels("x", "SA", 0, np.zeros((3, 3), int), np.zeros((3, 3), int), (0, 1))


def test_summarize_fixtures():
    assert summarize([1, 2, 3]).median == 2
    s = summarize([1, 2, 3, 4])
    assert (s.median, s.q1, s.q3, s.iqr) == (2.5, 1.75, 3.25, 1.5)
    assert summarize([0.3] * 5).iqr == 0
    with pytest.raises(ValueError):
        summarize([])


def test_success_curve_extremes():
    t, rates, auc = success_curve(np.ones(10))
    np.testing.assert_array_equal(rates, 1.0)
    assert auc == pytest.approx(1.0, abs=TOL)
    assert success_curve(np.zeros(10))[2] == 0.0


def test_success_curve_fixture():
    vals = [0.5, 0.7, 0.9]
    t, rates, auc = success_curve(vals)
    at = dict(zip(np.round(t, 2), rates))
    assert at[0.45] == 1.0
    assert at[0.6] == pytest.approx(2 / 3, abs=TOL)
    assert at[0.8] == pytest.approx(1 / 3, abs=TOL)
    # brute-force recount and trapezoid on the 0.01 grid
    grid = [k / 100 for k in range(40, 101)]
    counts = [sum(v >= g for v in vals) / 3 for g in grid]
    area = sum((counts[i] + counts[i + 1]) / 2 * 0.01 for i in range(60))
    assert auc == pytest.approx(area / 0.6, abs=TOL)
    assert np.all(np.diff(rates) <= 0)
    assert len(THRESHOLDS) == 61


def test_failure_rate():
    assert failure_rate([0.95, 0.85, 0.99, 0.5]) == 0.5
    assert failure_rate([0.9, 0.9]) == 0.0


def test_regression_identities(rng):
    gt = rng.uniform(-1, 1, 20)
    r = regress_params(gt, gt, "t_x")
    assert (r.r, r.slope, r.intercept) == pytest.approx((1.0, 1.0, 0.0), abs=TOL)
    r = regress_params(0.87 * gt, gt, "s")
    assert r.slope == pytest.approx(0.87, abs=TOL)
    assert r.r == pytest.approx(1.0, abs=TOL)
    assert r.significant


def test_regression_five_point_fixture():
    # dx = (-2,-1,0,1,2), dy = (-2,0,1,0,1): Sxy = 6, Sxx = 10, Syy = 6
    r = regress_params([2, 4, 5, 4, 5], [1, 2, 3, 4, 5], "t_y")
    assert r.slope == pytest.approx(0.6, abs=TOL)
    assert r.intercept == pytest.approx(2.2, abs=TOL)
    assert r.r == pytest.approx(6 / math.sqrt(60), abs=TOL)
    A = np.column_stack([[1, 2, 3, 4, 5], np.ones(5)])
    slope, icpt = np.linalg.solve(A.T @ A, A.T @ [2, 4, 5, 4, 5])
    assert (r.slope, r.intercept) == pytest.approx((slope, icpt), abs=TOL)


def test_regression_wraps_rotation():
    gt = np.array([math.pi - 0.1, 0.0, 1.0, -1.0])
    pred = gt.copy()
    pred[0] = -math.pi + 0.1  # 0.2 away across the wrap
    r = regress_params(pred, gt, "theta")
    assert r.r > 0.99


def test_regression_errors():
    with pytest.raises(ValueError):
        regress_params([1, 2, 3], [1, 1, 1], "s")
    with pytest.raises(ValueError):
        regress_params([1, 2], [1, 2], "s")


def test_bland_altman_fixtures():
    ba = bland_altman([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert (ba.bias, ba.loa_low, ba.loa_high, ba.band95) == (0.0, 0.0, 0.0, 0.0)
    ba = bland_altman([0.0, 2.0], [1.0, 1.0])
    assert ba.bias == 0.0
    assert (ba.loa_low, ba.loa_high) == pytest.approx((-1.96, 1.96), abs=TOL)


def test_bland_altman_five_point_fixture():
    d = np.array([0.1, -0.2, 0.3, 0.0, 0.05])
    ba = bland_altman(d, np.zeros(5))
    sd = math.sqrt(0.13 / 5)
    assert ba.bias == pytest.approx(0.05, abs=TOL)
    assert (ba.loa_low, ba.loa_high) == pytest.approx((0.05 - 1.96 * sd, 0.05 + 1.96 * sd), abs=TOL)
    assert ba.band95 == pytest.approx(0.28, abs=TOL)
    assert ba.fraction_within(0.1) == pytest.approx(0.6)


def test_bland_altman_wraps_rotation():
    # true theta = pi - 0.1, predicted -pi + 0.1: 0.2 apart, not 2 pi - 0.2
    ba = bland_altman([-math.pi + 0.1, 0.0], [math.pi - 0.1, 0.0], wrap_rotation=True)
    assert ba.differences[0] == pytest.approx(0.2, abs=TOL)
    ba = bland_altman([math.pi - 0.1, 0.0], [-math.pi + 0.1, 0.0], wrap_rotation=True)
    assert ba.differences[0] == pytest.approx(-0.2, abs=TOL)


def test_csv_writers(tmp_path):
    gt = np.array([[1, 2], [0, 0]])
    rec = evaluate_labels("S000_SA_000", "SA", 1, gt, gt, (0, 1, 2, 3))
    write_records_csv(tmp_path / "m.csv", [rec])
    header, row = (tmp_path / "m.csv").read_text().splitlines()
    assert header == ("sample_id,view,unet_index,iou_c1,iou_c2,iou_c3,iou_c4,iou_c5,wfiou,"
                      "dice_c1,dice_c2,dice_c3,dice_c4,dice_c5")
    assert row.startswith("S000_SA_000,SA,1,")
    t, rates, _ = success_curve([0.5])
    write_curve_csv(tmp_path / "c.csv", t, rates)
    assert (tmp_path / "c.csv").read_text().splitlines()[:2] == ["threshold,success_rate", "0.40,1"]
    write_summary_csv(tmp_path / "s.csv", [("final_auc", 0.5), ("n", 3)])
    assert (tmp_path / "s.csv").read_text() == "metric,value\nfinal_auc,0.5\nn,3\n"
