import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from handfold import autodiff as ad
from handfold.losses import (frame_errors, joint_loss, mean_distance_error, smooth_l1_value, success_rate_curve,
                             write_curve_csv)


def test_smooth_l1_hand_values():
    np.testing.assert_allclose(smooth_l1_value([0.0, 0.004, 0.01, 0.02, -1.0]), [0.0, 0.002, 0.005, 0.015, 0.995])
    np.testing.assert_allclose(smooth_l1_value([0.004, 0.02], "huber"), [50 * 0.004 ** 2, 0.015])


@pytest.mark.parametrize("variant", ["kinked", "huber"])
@given(st.floats(1e-9, 1e-4))
def test_smooth_l1_continuous_at_threshold(variant, d):
    lo, hi = smooth_l1_value([0.01 - d, 0.01 + d], variant)
    assert abs(hi - lo) <= 2 * d + 1e-12


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        smooth_l1_value([0.1], "nope")


def test_joint_loss_sums_stages_joints_coords_and_averages_batch():
    gt = np.zeros((2, 3, 3))
    est = np.full((2, 3, 3), 0.1)
    rep = joint_loss([ad.Tensor(est), ad.Tensor(2 * est)], gt)
    # per frame: 9 coords * (0.1 - 0.005) = 0.855 and 9 * (0.2 - 0.005) = 1.755
    np.testing.assert_allclose(rep.per_stage, [0.855, 1.755], rtol=1e-6)
    np.testing.assert_allclose(rep.value, 0.855 + 1.755, rtol=1e-6)


def test_joint_loss_shape_check():
    with pytest.raises(ValueError):
        joint_loss([ad.Tensor(np.zeros((2, 3, 3)))], np.zeros((2, 4, 3)))
    with pytest.raises(ValueError):
        joint_loss([], np.zeros((2, 3, 3)))


def test_mean_distance_error_345():
    pred = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 0.0]])
    assert mean_distance_error(pred, np.zeros((2, 3))) == 2.5


def test_frame_errors():
    pred = np.zeros((2, 2, 3))
    pred[1, :, 0] = 2.0
    assert frame_errors(pred, np.zeros((2, 2, 3))).tolist() == [0.0, 2.0]


def test_success_rate_strictly_below_threshold():
    assert success_rate_curve([1.0, 2.0, 3.0], [2.0, 3.5]).tolist() == [1 / 3, 1.0]


def test_success_rate_errors():
    with pytest.raises(ValueError):
        success_rate_curve([1.0], [])
    with pytest.raises(ValueError):
        success_rate_curve([], [1.0])


@given(st.lists(st.floats(0, 100), min_size=1, max_size=30), st.integers(0, 10_000))
def test_success_rate_monotone(errors, seed):
    th = np.sort(np.random.default_rng(seed).uniform(0, 120, 20))
    r = success_rate_curve(errors, th)
    assert (np.diff(r) >= 0).all() and r.min() >= 0 and r.max() <= 1


def test_curve_csv_rows(tmp_path):
    th = np.arange(0, 81, 2)
    write_curve_csv(tmp_path / "c.csv", th, success_rate_curve([5.0, 10.0], th))
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["threshold_mm", "success_rate"] and len(rows) == 42
    assert rows[4] == ["6", "0.500000"]
