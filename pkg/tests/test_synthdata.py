import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opstress import synthdata as sd


@pytest.fixture(scope="module")
def ds():
    return sd.generate_dataset(40, 10, 8, 16, seed=5)


def test_inputs_within_declared_ranges(ds):
    for split in (ds.train, ds.test):
        assert np.all((split.branch1[:, 0] >= 4) & (split.branch1[:, 0] <= 5))
        assert np.all((split.branch1[:, 1] >= 263) & (split.branch1[:, 1] <= 323))
        assert np.all((split.q_max >= 8000) & (split.q_max <= 20000))
        assert np.all(split.branch2 >= 0)


def test_flux_profile_peaks_mid_channel(ds):
    mid = np.argmax(ds.train.branch2, axis=1)
    assert set(mid) <= {ds.n_b2 // 2 - 1, ds.n_b2 // 2}


def test_pressure_is_ambient_on_inlet_plane_at_v4():
    trunk = sd.make_grid(16)
    f = sd.ground_truth_fields([4.0], [300.0], [15000.0], trunk)
    inlet = trunk[:, 1] == 0.0
    expected = np.full(inlet.sum(), 101325.0)
    np.testing.assert_array_equal(f[0, inlet, 0], expected)


def test_w_vanishes_on_walls(ds):
    wall = (ds.trunk[:, 0] == 0) | (ds.trunk[:, 0] == 1)
    assert np.all(ds.train.fields[:, wall, 3] == 0)


def test_fields_match_hand_formula_at_one_point():
    # x = 0.25, z = 0.5: Q = q/pi
    v, T, q = 4.3, 280.0, 12000.0
    Q = q / math.pi
    x, z = 0.25, 0.5
    P = 101325 - 40 * v * v * z + 2e-3 * Q * x * (1 - x)
    u = 0.15 * v * math.sin(2 * math.pi * z) * (1 - 2 * x)
    vv = 0.05 * v * math.sin(math.pi * x) * math.cos(math.pi * z) * (1 + (T - 293) / 300)
    w = 4 * v * x * (1 - x) * (1 + 1e-5 * Q)
    got = sd.ground_truth_fields([v], [T], [q], np.array([[x, z]]))[0, 0]
    np.testing.assert_allclose(got, [P, u, vv, w], rtol=1e-13, atol=1e-15)


def test_branch1_standardization_generalises_to_fresh_draw():
    big = sd.generate_dataset(10000, 10000, 4, 16, seed=11)
    b = big.standardized("test").b[:, :2]
    assert np.all(np.abs(b.mean(axis=0)) < 0.05)
    assert np.all(np.abs(b.std(axis=0) - 1) < 0.05)


def test_paper_velocity_example():
    norm = sd.Normalizer(
        np.array([4.51, 293.0]), np.array([0.26, 17.0]), 0.0, 1.0,
        np.zeros(2), np.ones(2), np.zeros(4), np.ones(4),
    )
    b1, _ = sd.destandardize_input(np.array([1.0, 0.0, 0.0, 0.0]), norm)
    assert b1[0] == pytest.approx(4.77, abs=1e-12)
    assert b1[1] == 293.0


def test_round_trip_and_zero_maps_to_mean(ds):
    s = ds.train.sample(3, ds.trunk)
    b, _, tnorm = sd.standardize(s, ds.normalizer)
    b1, q = sd.destandardize_input(b, ds.normalizer)
    np.testing.assert_allclose(b1, [s.v_in, s.T_in], rtol=0, atol=1e-12 * 323)
    np.testing.assert_allclose(q, s.q_profile, rtol=1e-12, atol=1e-9)
    back = sd.denormalize_fields(tnorm, ds.normalizer)
    span = ds.normalizer.field_max - ds.normalizer.field_min
    assert np.all(np.abs(back - s.fields) <= 1e-12 * span)
    b1, q = sd.destandardize_input(np.zeros(ds.d), ds.normalizer)
    np.testing.assert_array_equal(b1, ds.normalizer.branch1_mean)
    np.testing.assert_array_equal(q, ds.normalizer.branch2_mean)
    assert sd.standardize_inputs([4.5, 290], [ds.normalizer.branch2_mean] * ds.n_b2, ds.normalizer)[2] == 0


def test_training_targets_in_unit_box(ds):
    t = ds.standardized("train").targets_norm
    assert t.min() >= -1 - 1e-12 and t.max() <= 1 + 1e-12
    assert "test_target_exceedance" in ds.meta


def test_degenerate_range_asks_for_more_training_data():
    with pytest.raises(ValueError, match="increase n_train"):
        sd.generate_dataset(1, 1, 4, 16, seed=0)


@pytest.mark.parametrize("args", [(0, 1, 4, 16), (5, 5, 3, 16), (5, 5, 4, 9), (5, 5, 4, 20)])
def test_bad_sizes_rejected(args):
    with pytest.raises(ValueError):
        sd.generate_dataset(*args, seed=0)


def test_split_is_deterministic_in_seed():
    a = sd.generate_dataset(10, 5, 4, 16, seed=3)
    b = sd.generate_dataset(10, 5, 4, 16, seed=3)
    c = sd.generate_dataset(10, 5, 4, 16, seed=4)
    np.testing.assert_array_equal(a.train.branch1, b.train.branch1)
    np.testing.assert_array_equal(a.test.fields, b.test.fields)
    assert not np.array_equal(a.train.branch1, c.train.branch1)


def test_feasibility_examples():
    b = np.array([1.0, -1.0, 1.0, 0.2])
    r = sd.feasibility_check(b, [0, 1, 2])
    assert r.in_bounds and r.mahalanobis_contrib == 3.0
    assert sd.feasibility_check(b, []).mahalanobis_contrib == 0.0
    assert not sd.feasibility_check(np.array([1.2, 0.0]), [0]).in_bounds


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=10))
def test_in_bound_values_map_within_one_sigma(values):
    norm = sd.Normalizer(
        np.array([4.5, 293.0]), np.array([0.3, 17.0]), 8000.0, 4000.0,
        np.zeros(2), np.ones(2), np.zeros(4), np.ones(4),
    )
    b = np.zeros(2 + len(values))
    b[2:] = values
    b[0] = values[0]
    b1, q = sd.destandardize_input(b, norm)
    assert abs(b1[0] - 4.5) <= 0.3 + 1e-12
    assert np.all(np.abs(q - 8000.0) <= 4000.0 + 1e-9)
    rep = sd.feasibility_check(b, range(len(b)))
    assert rep.in_bounds and rep.mahalanobis_contrib <= len(b)


def test_field_parameter_derivatives_are_finite(ds):
    trunk = ds.trunk
    base = np.array([4.5, 290.0, 14000.0])
    for i, h in enumerate([1e-6, 1e-4, 1e-2]):
        up, dn = base.copy(), base.copy()
        up[i] += h
        dn[i] -= h
        d = (sd.ground_truth_fields(*[[v] for v in up], trunk)
             - sd.ground_truth_fields(*[[v] for v in dn], trunk)) / (2 * h)
        assert np.all(np.isfinite(d))


def test_persistence_round_trip(ds, tmp_path):
    sd.save_dataset(ds, tmp_path / "d")
    raw = np.fromfile(tmp_path / "d" / "train_fields.f64", dtype="<f8")
    assert raw.size == ds.train.fields.size
    back = sd.load_dataset(tmp_path / "d")
    np.testing.assert_array_equal(back.train.fields, ds.train.fields)
    np.testing.assert_array_equal(back.test.branch2, ds.test.branch2)
    np.testing.assert_array_equal(back.normalizer.field_max, ds.normalizer.field_max)
    assert back.seed == ds.seed and back.n_b2 == ds.n_b2
