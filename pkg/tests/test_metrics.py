"""Metric definitions, evaluation protocols, and the historical baseline."""

import numpy as np
import pytest

from roadflow import metrics as ME


# --------------------------------------------------------------------------
# scalar metrics

def test_rmse_hand_example():
    preds = np.array([[1.0, 2.0], [3.0, 4.0]])
    truths = np.array([[1.0, 4.0], [3.0, 0.0]])
    # squared errors 0, 4, 0, 16 -> mean 5
    assert abs(ME.rmse(preds, truths) - np.sqrt(5.0)) <= 1e-12


def test_mae_hand_example():
    preds = np.array([[1.0, 2.0], [3.0, 4.0]])
    truths = np.array([[1.0, 4.0], [3.0, 0.0]])
    assert abs(ME.mae(preds, truths) - 1.5) <= 1e-12


def test_rmse_mae_single_pair_and_ordering():
    truth = np.array([0.0, 0.0])
    pred = np.array([3.0, 4.0])
    assert abs(ME.rmse(pred, truth) - np.sqrt(12.5)) <= 1e-12
    assert abs(ME.mae(pred, truth) - 3.5) <= 1e-12
    rng = np.random.default_rng(5)
    for _ in range(5):
        p = rng.normal(0, 1, (3, 4))
        t = rng.normal(0, 1, (3, 4))
        assert ME.rmse(p, t) >= ME.mae(p, t) - 1e-12


def test_mae_translation_sensitivity():
    rng = np.random.default_rng(6)
    t = rng.uniform(0, 1, (4, 4))
    p = t + rng.uniform(0, 1, (4, 4))  # p >= t elementwise
    base = ME.mae(p, t)
    assert abs(ME.mae(p + 2.5, t) - (base + 2.5)) <= 1e-12


def test_mape_one_cell_off_hand_example():
    truth = np.ones((1, 2, 2))
    pred = truth.copy()
    pred[0, 1, 1] = 2.0
    assert abs(ME.mape_citywide(pred, truth) - 0.25) <= 1e-15


def test_mape_hand_example():
    preds = np.array([[2.0, 2.0], [1.0, 5.0]])
    truths = np.array([[1.0, 3.0], [2.0, 2.0]])
    # sample ratios: 2/4 and 4/4 -> mean 0.75
    assert abs(ME.mape_citywide(preds, truths) - 0.75) <= 1e-12


def test_mape_is_scale_invariant():
    rng = np.random.default_rng(0)
    preds = rng.uniform(0, 5, (6, 4, 4, 2))
    truths = rng.uniform(1, 5, (6, 4, 4, 2))
    a = ME.mape_citywide(preds, truths)
    b = ME.mape_citywide(10.0 * preds, 10.0 * truths)
    assert abs(a - b) <= 1e-9


def test_mape_skips_zero_truth_samples():
    preds = np.array([[1.0, 1.0], [2.0, 2.0]])
    truths = np.array([[0.0, 0.0], [2.0, 2.0]])
    assert abs(ME.mape_citywide(preds, truths) - 0.0) <= 1e-12
    with pytest.raises(ValueError):
        ME.mape_citywide(preds, np.zeros_like(truths))


def test_mape_mask_restricts_cells():
    preds = np.zeros((1, 2, 2, 1))
    truths = np.ones((1, 2, 2, 1))
    truths[0, 0, 0, 0] = 3.0
    mask = np.zeros((2, 2), dtype=bool)
    mask[0, 0] = True
    assert abs(ME.mape_citywide(preds, truths, mask=mask) - 1.0) <= 1e-12
    with pytest.raises(ValueError):
        ME.mape_citywide(preds, truths, mask=np.ones((3, 2), dtype=bool))


def test_metrics_validate_inputs():
    with pytest.raises(ValueError):
        ME.rmse(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        ME.mae(np.ones(0), np.ones(0))
    with pytest.raises(ValueError):
        ME.mape_citywide(np.ones(3), np.ones(3))


# --------------------------------------------------------------------------
# heavy region

def test_heavy_region_takes_top_fifth():
    maps = np.zeros((2, 5, 4, 2))
    flat_rank = np.arange(20.0).reshape(5, 4)
    maps[:, :, :, 0] = flat_rank
    mask = ME.heavy_region_mask(maps)
    assert mask.sum() == 4  # ceil(0.2 * 20)
    assert np.array_equal(np.sort(flat_rank[mask]), [16.0, 17.0, 18.0, 19.0])


def test_heavy_region_tie_break_is_row_major():
    maps = np.ones((1, 2, 5, 1))
    mask = ME.heavy_region_mask(maps)
    want = np.zeros((2, 5), dtype=bool)
    want[0, :2] = True  # ceil(0.2 * 10) = 2 cells, earliest first
    assert np.array_equal(mask, want)


def test_heavy_region_validates():
    with pytest.raises(ValueError):
        ME.heavy_region_mask(np.ones((2, 3, 3)))


# --------------------------------------------------------------------------
# time slices

_CAL = dict(intervals_per_day=96, interval_minutes=15, start_dow=0)


def test_slice_day_night_partition():
    idx = np.arange(96)
    day = ME.slice_mask(idx, "day", **_CAL)
    night = ME.slice_mask(idx, "night", **_CAL)
    assert np.array_equal(day, ~night)
    assert day[24] and day[71]       # 06:00 and 17:45 start times
    assert not day[23] and not day[72]  # 05:45 and 18:00


def test_slice_rush_windows():
    idx = np.arange(96)
    rush = ME.slice_mask(idx, "rush", **_CAL)
    on = idx[rush] * 15
    assert on.min() == 450 and 570 not in on
    expect = set(range(450, 570, 15)) | set(range(1050, 1170, 15))
    assert set(on.tolist()) == expect


def test_slice_weekday_weekend_rotate_with_start():
    idx = np.arange(7 * 4)
    wk = ME.slice_mask(idx, "weekday", intervals_per_day=4, interval_minutes=360,
                       start_dow=4)
    # days: fri sat sun mon tue wed thu
    want = np.repeat([True, False, False, True, True, True, True], 4)
    assert np.array_equal(wk, want)
    we = ME.slice_mask(idx, "weekend", intervals_per_day=4, interval_minutes=360,
                       start_dow=4)
    assert np.array_equal(we, ~want)


def test_slice_rejects_unknown_name():
    with pytest.raises(ValueError):
        ME.slice_mask(np.arange(4), "brunch", **_CAL)


def test_time_slice_returns_indices():
    idx = np.arange(20, 40)
    got = ME.time_slice(idx, "day", **_CAL)
    assert got.min() == 24
    assert np.array_equal(got, idx[idx >= 24])


# --------------------------------------------------------------------------
# baseline and evaluation reports

def test_ha_baseline_is_temporal_mean():
    maps = np.stack([np.zeros((2, 2, 2)), np.full((2, 2, 2), 4.0)])
    assert np.array_equal(ME.ha_baseline(maps), np.full((2, 2, 2), 2.0))
    with pytest.raises(ValueError):
        ME.ha_baseline(np.zeros((0, 2, 2, 2)))


def test_evaluate_slices_cover_samples():
    rng = np.random.default_rng(1)
    n = 96
    preds = rng.uniform(0, 2, (n, 4, 4, 2))
    truths = rng.uniform(1, 3, (n, 4, 4, 2))
    rep = ME.evaluate(preds, truths, np.arange(n), **_CAL)
    assert rep.count == n
    # start_dow=0 and one day of samples: all weekday, no weekend
    assert rep.slices["weekday"]["count"] == n
    assert rep.slices["weekend"] == {"count": 0}
    assert rep.slices["day"]["count"] + rep.slices["night"]["count"] == n
    assert rep.slices["rush"]["count"] == 16


def test_evaluate_heavy_mask_subreport():
    preds = np.zeros((2, 2, 2, 1))
    truths = np.ones((2, 2, 2, 1))
    truths[:, 0, 0, 0] = 10.0
    mask = ME.heavy_region_mask(truths)
    rep = ME.evaluate(preds, truths, np.arange(2), heavy_mask=mask, **_CAL)
    assert rep.slices["heavy"]["mape"] == 1.0
    assert rep.slices["heavy"]["mae"] == 10.0


def test_evaluate_requires_one_index_per_sample():
    with pytest.raises(ValueError):
        ME.evaluate(np.ones((3, 2, 2, 1)), np.ones((3, 2, 2, 1)),
                    np.arange(2), **_CAL)


def test_report_text_is_sorted_and_parseable():
    rep = ME.evaluate(np.ones((4, 2, 2, 1)), np.full((4, 2, 2, 1), 2.0),
                      np.arange(4), **_CAL)
    lines = rep.lines()
    assert lines[:4] == sorted(lines[:4])   # top-level block
    assert lines[4:] == sorted(lines[4:])   # slice block, name-then-key order
    parsed = dict(line.split("=", 1) for line in lines)
    assert float(parsed["mape"]) == 0.5
    assert parsed["count"] == "4"
    assert rep.text().endswith("\n")
