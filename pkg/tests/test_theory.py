import json
from types import SimpleNamespace

import numpy as np
import pytest

from opstress import operators as ops
from opstress import theory as th
from opstress import synthdata as sd
from opstress import training as tr


def test_upper_bound_orthonormal_saturation():
    d = 5
    J = np.linalg.qr(np.random.default_rng(0).normal(size=(20, d)))[0]
    res = th.check_upper_bound(J, 1.0, 1.0, d, n_trials=50)
    assert res.passed and res.details["bound"] == pytest.approx(d)
    # the corner attack reaches eps * sqrt(d), well inside eps * S_d = d
    delta = np.ones(d)
    assert np.linalg.norm(J @ delta) == pytest.approx(np.sqrt(d))


def test_upper_bound_single_column_is_tight():
    J = np.zeros((6, 4))
    J[:, 2] = np.arange(6.0)
    res = th.check_upper_bound(J, 2.0, 0.5, 1, n_trials=10)
    assert res.passed and abs(res.worst_slack) <= 1e-15


def test_upper_bound_catches_understated_norms(monkeypatch):
    J = np.random.default_rng(1).normal(size=(10, 4))
    monkeypatch.setattr(th, "column_norms", lambda A: 0.5 * np.linalg.norm(A, axis=0))
    assert not th.check_upper_bound(J, 1.0, 1.0, 2, n_trials=4).passed


def test_lower_bound_orthonormal_pythagoras():
    J = np.linalg.qr(np.random.default_rng(2).normal(size=(12, 4)))[0]
    res = th.check_lower_bound(J, np.ones(12), 1.0, 2)
    assert res.passed and res.details["orthogonal"]
    assert res.details["attack_norm"] == pytest.approx(np.sqrt(2), abs=1e-12)


def test_lower_bound_identical_columns_is_vacuous():
    c = np.random.default_rng(3).normal(size=8)
    J = np.stack([c, c, 0.1 * c], axis=1)
    res = th.check_lower_bound(J, np.ones(8), 1.0, 2)
    assert res.passed and res.details["vacuous"] and res.details["lower"] == 0.0
    assert res.details["coherence"] == pytest.approx(1.0)


def test_lower_bound_bracket_for_tall_gaussian():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        d = int(rng.integers(2, 10))
        J = rng.normal(size=(300, d))
        f = rng.normal(size=300)
        k = int(rng.integers(1, d + 1))
        low = th.check_lower_bound(J, f, 1.0, k)
        up = th.check_upper_bound(J, 1.0, 1.0, k, n_trials=2)
        assert low.passed and up.passed
        assert low.details["lower"] <= low.details["attack_norm"] + 1e-12 <= up.details["bound"] + 2e-12


def test_random_bound_checks_zero_violations():
    ups, lows = th.random_bound_checks(200, seed=5)
    assert ups.passed and lows.passed


def test_rho_bounds_and_equality_cases():
    res = th.check_rho_bounds(n=2000, seed=6)
    assert res.passed and res.details["equality_residual"] <= 1e-12
    single, cumulative, mono = th.rho_bound_slacks(np.ones(9))
    assert abs(single) <= 1e-12 and abs(cumulative) <= 1e-12 and mono > 0


def test_rho_bounds_detects_a_broken_metric(monkeypatch):
    monkeypatch.setattr(th, "rho_table", lambda s: np.linspace(0.01, 1, len(s)))
    assert not th.check_rho_bounds(n=50, seed=0).passed


def test_gram_schmidt_preserves_norms():
    s = np.array([3.0, 0.2, 1.5, 7.0])
    J = th.orthogonal_columns(30, s, np.random.default_rng(7))
    assert np.max(np.abs(np.linalg.norm(J, axis=0) - s)) <= 1e-12
    G = J.T @ J
    assert np.max(np.abs(G - np.diag(np.diag(G)))) <= 1e-12


def test_two_factor_exact():
    res = th.check_two_factor(n_instances=20, d=6, seed=8)
    assert res.passed and res.trials == 120


def test_linearization_closed_forms():
    A = np.random.default_rng(9).normal(size=(10, 4))
    lin = ops.AffineModel(A, np.ones(10))
    assert th.measure_linearization(lin, np.zeros((3, 4)), 1.0, 2) <= 1e-10
    quad = SimpleNamespace(evaluate=lambda b, trunk=None: np.asarray(b, float) ** 2,
                           jacobian=lambda b, trunk=None: np.diag(2 * np.asarray(b, float)))
    eps = 0.3
    assert th.measure_linearization(quad, np.ones((1, 1)), eps, 1, n_trials=4) == pytest.approx(eps / 2)


class RankOnePod:
    """``f(b) = U (a (w . b) + c0)`` with orthonormal ``U``; one channel."""

    def __init__(self, w, a, c0, N=12, seed=0):
        self.w, self.a, self.c0 = np.asarray(w, float), np.asarray(a, float), np.asarray(c0, float)
        r = self.a.size
        U = np.linalg.qr(np.random.default_rng(seed).normal(size=(N, r)))[0]
        self.pod = SimpleNamespace(modes=U[None], rank=r)

    def coefficients(self, B):
        return (np.atleast_2d(B) @ self.w)[:, None, None] * self.a + self.c0

    def coefficient_jacobian(self, b):
        return np.outer(self.a, self.w)

    def expand(self, alpha):
        return np.einsum("cnr,...cr->...nc", self.pod.modes, alpha)

    def evaluate(self, b, trunk=None):
        return self.expand(self.coefficients(b)[0])

    def jacobian(self, b, trunk=None):
        return self.pod.modes[0] @ self.coefficient_jacobian(b)


def test_pod_ceiling_rank_one_equality():
    d = 4
    m = RankOnePod(np.full(d, 0.5), [2.0, -1.0], [3.0, 1.0])
    assert th.isometry_residual(m) <= 1e-10
    b = np.zeros(d)
    res = th.check_pod_ceiling(m, b[None], 0.7, d, n_trials=40)
    assert res.passed and res.details["strict_violations"] == 0
    # the all-equal-sign corner is aligned with w: bound is attained exactly
    assert res.details["max_observed_over_bound"] == pytest.approx(1.0, abs=1e-12)


def test_pod_ceiling_on_trained_model():
    ds = sd.generate_dataset(40, 5, 8, 64, seed=1)
    model, _ = tr.train("poddeeponet", ds, tr.TrainConfig(max_epochs=15, batch_size=8))
    test = ds.standardized(ds.test)
    res = th.check_pod_ceiling(model, test.b[:3], 1.0, 3, n_trials=10, trunk=test.trunk_norm)
    assert res.passed and res.details["isometry_residual"] <= 1e-10
    # unchanged coefficients: both sides vanish
    alpha = model.coefficients(test.b[:1])
    assert np.linalg.norm(model.expand(alpha) - model.expand(alpha.copy())) == 0.0


def test_single_point_attack_on_truth_is_the_floor():
    G, f0 = th.desk_operator(seed=1)
    b0 = np.zeros(G.shape[1])
    eps = 0.5
    got = th.single_point_attack(lambda B: np.atleast_2d(B) @ G.T + f0, b0, eps)
    assert got == pytest.approx(eps * np.linalg.norm(G, axis=0).max() / np.linalg.norm(f0), rel=1e-12)


def test_uniform_operator_attack_independent_of_column():
    s = np.full(5, 2.0)
    G = th.orthogonal_columns(15, s, np.random.default_rng(2))
    f0 = np.ones(15) * 3
    got = th.single_point_attack(lambda B: np.atleast_2d(B) @ G.T + f0, np.zeros(5), 0.4)
    assert got == pytest.approx(0.4 * 2.0 / np.linalg.norm(f0), rel=1e-12)


def test_report_json_round_trip():
    rep = th.run_suite(seed=1, n_bound=20, n_rho=100, n_two_factor=3, impossibility=False)
    out = json.loads(rep.to_json())
    assert out["passed"] and {c["name"] for c in out["checks"]} == {
        "upper_bound", "lower_bound", "rho_bounds", "two_factor"}
