"""Numerical checks of the sparse-attack bounds.

Each check returns a :class:`CheckResult` holding the worst signed slack
(bound minus observed) over its trials. Inequalities pass when the worst
slack is at least ``-tolerance``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .sensitivity import column_norms, d_eff, jacobian_exact, rho_table

LIN_FLOOR = 1e-12


@dataclass
class CheckResult:
    name: str
    trials: int
    worst_slack: float
    passed: bool
    tolerance: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _result(name, trials, slacks, tol, **details) -> CheckResult:
    worst = float(np.min(slacks)) if len(slacks) else float("inf")
    return CheckResult(name, int(trials), worst, bool(worst >= -tol), tol, details)


def _merge(name: str, parts: Sequence[CheckResult], **details) -> CheckResult:
    worst = min(p.worst_slack for p in parts)
    return CheckResult(name, sum(p.trials for p in parts), worst, all(p.passed for p in parts),
                       max(p.tolerance for p in parts), details)


def _top_k(s: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-s, kind="stable")[:k]


def _sign_patterns(k: int) -> np.ndarray:
    return np.array(list(itertools.product((-1.0, 1.0), repeat=k)))


# -- linear bounds -----------------------------------------------------------

def check_upper_bound(J, f_norm: float, epsilon: float, k: int, n_trials: int = 100, seed=0,
                      tol: float = 1e-12) -> CheckResult:
    """Random and sign-aligned ``k``-sparse perturbations never beat ``eps * S_k``."""
    J = np.asarray(J, dtype=float)
    d = J.shape[1]
    if not 1 <= k <= d:
        raise ValueError("k must lie in [1, d]")
    s = column_norms(J)
    bound = epsilon * np.sort(s)[::-1][:k].sum() / f_norm
    rng = np.random.default_rng(seed)
    deltas = np.zeros((n_trials, d))
    for t in range(n_trials):
        idx = rng.choice(d, size=k, replace=False)
        # alternate interior draws with box corners, where the maximum lives
        deltas[t, idx] = (rng.uniform(-epsilon, epsilon, k) if t % 2 else
                          epsilon * rng.choice((-1.0, 1.0), k))
    observed = np.linalg.norm(deltas @ J.T, axis=1) / f_norm
    slacks = [bound - observed]
    if k <= 12:
        top = _top_k(s, k)
        corner = np.zeros((2**k, d))
        corner[:, top] = epsilon * _sign_patterns(k)
        slacks.append(bound - np.linalg.norm(corner @ J.T, axis=1) / f_norm)
    slacks = np.concatenate(slacks)
    return _result("upper_bound", slacks.size, slacks, tol, bound=float(bound))


def sign_aligned_attack(J, f_vec, epsilon: float, k: int) -> np.ndarray:
    """Top-``k`` columns pushed by ``eps`` in the direction that grows the output."""
    J = np.asarray(J, dtype=float)
    s = column_norms(J)
    top = _top_k(s, k)
    delta = np.zeros(J.shape[1])
    sgn = np.sign(J[:, top].T @ np.asarray(f_vec, dtype=float))
    delta[top] = epsilon * np.where(sgn == 0, 1.0, sgn)
    return delta


def check_lower_bound(J, f_vec, epsilon: float, k: int, tol: float = 1e-12,
                      orth_tol: float = 1e-10) -> CheckResult:
    """The sign-aligned attack reaches the coherence-corrected lower bound.

    A negative bound (strongly coherent columns) is satisfied trivially; the
    coherence level is reported. With orthogonal top-k columns the attack
    norm must equal ``eps * sqrt(sum of top-k s^2)``.
    """
    J = np.asarray(J, dtype=float)
    s = column_norms(J)
    top = _top_k(s, k)
    delta = sign_aligned_attack(J, f_vec, epsilon, k)
    got = float(np.linalg.norm(J @ delta))
    G = J[:, top].T @ J[:, top]
    cross = float(np.sum(np.abs(np.triu(G, 1))))
    sq = float(np.sum(s[top] ** 2))
    lower_sq = epsilon**2 * (sq - 2 * cross)
    scale = max(epsilon**2 * sq, 1.0)
    slacks = [(got**2 - lower_sq) / scale, (epsilon * s[top].sum() - got) / max(epsilon * s[top].sum(), 1.0)]
    denom = np.outer(s[top], s[top])
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(denom > 0, np.abs(G) / denom, 0.0)
    np.fill_diagonal(cos, 0.0)
    coherence = float(cos.max()) if k > 1 else 0.0
    orthogonal = coherence <= 1e-12
    if orthogonal:
        target = epsilon * np.sqrt(sq)
        slacks.append(orth_tol - abs(got - target) / max(target, 1.0))
    return _result("lower_bound", 1, slacks, tol, coherence=coherence, vacuous=bool(lower_sq <= 0),
                   orthogonal=orthogonal, attack_norm=got, lower=float(np.sqrt(max(lower_sq, 0.0))))


# -- concentration bounds ----------------------------------------------------

def default_s_sampler(rng: np.random.Generator) -> np.ndarray:
    """Mix of Dirichlet, lognormal and sparse non-negative vectors."""
    d = int(rng.integers(1, 120))
    kind = rng.integers(3)
    if kind == 0:
        s = rng.dirichlet(np.full(d, rng.uniform(0.05, 5)))
    elif kind == 1:
        s = rng.lognormal(0, rng.uniform(0.1, 3), d)
    else:
        s = rng.exponential(size=d) * (rng.random(d) < rng.uniform(0.05, 0.5))
    if not np.any(s > 0):
        s[rng.integers(d)] = 1.0
    return s


def rho_bound_slacks(s) -> np.ndarray:
    """Signed slacks of the single-point and cumulative bounds, plus monotonicity."""
    s = np.asarray(s, dtype=float)
    r = rho_table(s)
    de = d_eff(s)
    srt = np.sort(s)[::-1]
    k = np.arange(1, s.size + 1)
    bound = np.sqrt(np.minimum(1.0, (1 + (k - 1) * (srt / srt[0]) ** 2) / de))
    single = r[0] - 1 / np.sqrt(de)
    mono = np.diff(r).min() if s.size > 1 else 0.0
    return np.array([single, (r - bound).min(), mono])


def check_rho_bounds(sampler: Callable = default_s_sampler, n: int = 10_000, seed=0,
                     tol: float = 1e-12) -> CheckResult:
    """Concentration bounds on many random sensitivity vectors, plus equality cases."""
    rng = np.random.default_rng(seed)
    slacks = np.array([rho_bound_slacks(sampler(rng)) for _ in range(n)])
    eq = []
    for d in (1, 2, 7, 100):
        u = np.ones(d)
        r, de = rho_table(u), d_eff(u)
        eq.append(np.max(np.abs(r - np.sqrt(np.arange(1, d + 1) / de))))
    e = np.zeros(10)
    e[0] = 1.0
    eq.append(abs(rho_table(e)[0] - 1.0) + abs(d_eff(e) - 1.0))
    # ties at the top: s_(k) = s_(1) collapses the bound to sqrt(k / d_eff)
    s = np.array([2.0, 2.0, 2.0, 0.5, 0.1])
    eq.append(max(0.0, np.sqrt(3 / d_eff(s)) - rho_table(s)[2]))
    eq = np.array(eq)
    worst = np.concatenate([slacks.min(axis=0), -eq])
    return _result("rho_bounds", n, worst, tol, single_point_worst=float(slacks[:, 0].min()),
                   cumulative_worst=float(slacks[:, 1].min()), monotone_worst=float(slacks[:, 2].min()),
                   equality_residual=float(eq.max()))


def orthogonal_columns(m: int, s, rng) -> np.ndarray:
    """Random ``m x d`` matrix with orthogonal columns of norms ``s`` (Gram-Schmidt)."""
    s = np.asarray(s, dtype=float)
    A = rng.standard_normal((m, s.size))
    Q = np.zeros_like(A)
    for i in range(s.size):
        v = A[:, i].copy()
        for _ in range(2):  # re-orthogonalize once for stability
            v -= Q[:, :i] @ (Q[:, :i].T @ v)
        Q[:, i] = v / np.linalg.norm(v)
    return Q * s


def check_two_factor(n_instances: int = 100, d: int = 8, m: int = 40, epsilon: float = 1.0, seed=0,
                     tol: float = 1e-10) -> CheckResult:
    """Exhaustive best ``k``-sparse corner attack on ``f(b) = J b + f0`` equals ``M * rho(k)``."""
    rng = np.random.default_rng(seed)
    supports = [np.array(c) for k in range(1, d + 1) for c in itertools.combinations(range(d), k)]
    deltas, ks = [], []
    for sup in supports:
        block = np.zeros((2 ** sup.size, d))
        block[:, sup] = epsilon * _sign_patterns(sup.size)
        deltas.append(block)
        ks.append(np.full(len(block), sup.size))
    deltas, ks = np.vstack(deltas), np.concatenate(ks)
    slacks, norm_err = [], 0.0
    for _ in range(n_instances):
        s = rng.lognormal(0, 1, d)
        J = orthogonal_columns(m, s, rng)
        norm_err = max(norm_err, float(np.max(np.abs(column_norms(J) - s))))
        f0 = rng.standard_normal(m) * rng.uniform(1, 10)
        f_norm = np.linalg.norm(f0)
        err = np.linalg.norm(deltas @ J.T, axis=1) / f_norm
        M = epsilon * np.linalg.norm(s) / f_norm
        r = rho_table(s)
        for k in range(1, d + 1):
            best = err[ks == k].max()
            slacks.append(tol - abs(best - M * r[k - 1]) / M)
    slacks.append(1e-12 - norm_err)
    return _result("two_factor", n_instances * d, np.array(slacks), 0.0, column_norm_error=norm_err,
                   relative_tolerance=tol)


# -- nonlinear models ---------------------------------------------------------

def _model_jacobian(model, b, trunk) -> np.ndarray:
    if hasattr(model, "jacobian"):
        return np.asarray(model.jacobian(b, trunk), dtype=float)
    return jacobian_exact(model, b, trunk)


def _sparse_deltas(rng, n: int, d: int, k: int, epsilon: float) -> np.ndarray:
    out = np.zeros((n, d))
    for t in range(n):
        idx = rng.choice(d, size=k, replace=False)
        out[t, idx] = epsilon * rng.choice((-1.0, 1.0), k) if t % 2 == 0 else rng.uniform(-epsilon, epsilon, k)
    return out


def _linearization_ratios(model, b, trunk, deltas, J) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    f0 = model.evaluate(b, trunk).ravel()
    F = np.array([model.evaluate(b + dl, trunk).ravel() for dl in deltas])
    lin = deltas @ J.T
    change = F - f0
    ratio = np.linalg.norm(change - lin, axis=1) / np.maximum(np.linalg.norm(lin, axis=1), LIN_FLOOR)
    return ratio, change, f0


def measure_linearization(model, samples, epsilon: float, k: int, n_trials: int = 50, trunk=None,
                          seed=0) -> float:
    """Worst relative gap between the true response and its Jacobian prediction."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for b in samples:
        J = _model_jacobian(model, b, trunk)
        deltas = _sparse_deltas(rng, n_trials, b.size, k, epsilon)
        ratio, _, _ = _linearization_ratios(model, b, trunk, deltas, J)
        worst = max(worst, float(ratio.max()))
    return worst


def isometry_residual(pod_model, n_trials: int = 20, seed=0) -> float:
    """Max of ``| ||U (c1 - c2)|| - ||c1 - c2|| |`` over random coefficient pairs."""
    rng = np.random.default_rng(seed)
    C, r = pod_model.pod.modes.shape[0], pod_model.pod.rank
    worst = 0.0
    for _ in range(n_trials):
        c1, c2 = rng.standard_normal((2, C, r))
        diff = c1 - c2
        worst = max(worst, abs(float(np.linalg.norm(pod_model.expand(diff[None])) - np.linalg.norm(diff))))
    return worst


def check_pod_ceiling(pod_model, samples, epsilon: float, k: int, n_trials: int = 50, trunk=None,
                      seed=0, iso_tol: float = 1e-10) -> CheckResult:
    """Projection-model errors stay below ``eps sigma_1(J_g) sqrt(k) / ||g||``.

    Violations are allowed up to the linearization slack ``alpha * bound``,
    with ``alpha`` measured on the same perturbations.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    rng = np.random.default_rng(seed)
    slacks, strict, alphas, ratios = [], 0, [], []
    for b in samples:
        Jg = pod_model.coefficient_jacobian(b)
        sigma1 = float(np.linalg.norm(Jg, 2))
        g_norm = float(np.linalg.norm(pod_model.coefficients(b[None])))
        bound = epsilon * sigma1 * np.sqrt(k) / g_norm
        deltas = _sparse_deltas(rng, n_trials, b.size, k, epsilon)
        J = _model_jacobian(pod_model, b, trunk)
        ratio, change, f0 = _linearization_ratios(pod_model, b, trunk, deltas, J)
        alpha = float(ratio.max())
        observed = np.linalg.norm(change, axis=1) / np.linalg.norm(f0)
        strict += int(np.sum(observed > bound))
        slacks.append(bound * (1 + alpha) - observed)
        alphas.append(alpha)
        ratios.append(float(observed.max() / bound) if bound > 0 else 0.0)
    iso = isometry_residual(pod_model, seed=seed)
    slacks = np.concatenate(slacks + [np.array([iso_tol - iso])])
    return _result("pod_ceiling", len(samples) * n_trials, slacks, 0.0, alpha_max=float(max(alphas)),
                   strict_violations=strict, isometry_residual=iso, max_observed_over_bound=max(ratios))


# -- accuracy versus robustness -----------------------------------------------

def single_point_attack(predict: Callable, b0, epsilon: float, n_grid: int = 11) -> float:
    """Best relative error from moving one coordinate by at most ``eps``."""
    b0 = np.asarray(b0, dtype=float)
    d = b0.size
    steps = np.linspace(-epsilon, epsilon, n_grid)
    steps = steps[steps != 0]
    B = np.repeat(b0[None], d * steps.size, axis=0)
    rows = np.arange(B.shape[0])
    B[rows, np.repeat(np.arange(d), steps.size)] += np.tile(steps, d)
    f0 = np.asarray(predict(b0[None])).reshape(-1)
    F = np.asarray(predict(B)).reshape(B.shape[0], -1)
    return float(np.max(np.linalg.norm(F - f0, axis=1)) / np.linalg.norm(f0))


def _fit_surrogate(X, Y, hidden: int, depth: int, epochs: int, lr: float, rng) -> list:
    layers = nc.init_mlp([X.shape[1]] + [hidden] * depth + [Y.shape[1]], rng, "tanh")
    params = [a for L in layers for a in (L.weights, L.bias)]
    state = nc.AdamState.zeros_like(params)
    for _ in range(epochs):
        tape = nc.MlpTape(layers)
        out = nc.mlp_forward(layers, X, tape=tape)
        grads, _ = tape.backward(2.0 * (out - Y) / out.size)
        nc.adam_step(params, [a for g in grads for a in g], state, lr)
    return layers


DEFAULT_LADDER = ((4, 1, 100), (16, 1, 400), (32, 2, 1500), (64, 2, 4000))


def impossibility_experiment(G, b0, epsilon: float, ladder=DEFAULT_LADDER, f0=None, n_train: int = 256,
                             radius: float = 1.5, lr: float = 3e-3, seed=0) -> dict:
    """Train better and better surrogates of ``b -> G b + f0`` and attack each.

    ``ladder`` lists ``(width, depth, epochs)`` rungs. Each rung reports its
    held-out relative error and its best single-coordinate attack error.
    """
    G = np.asarray(G, dtype=float)
    m, d = G.shape
    b0 = np.asarray(b0, dtype=float)
    f0 = np.zeros(m) if f0 is None else np.asarray(f0, dtype=float)
    truth = lambda B: np.atleast_2d(B) @ G.T + f0
    rng = np.random.default_rng(seed)
    X = b0 + rng.uniform(-radius, radius, (n_train, d))
    Xt = b0 + rng.uniform(-radius, radius, (n_train, d))
    Y, Yt = truth(X), truth(Xt)
    s = column_norms(G)
    floor = epsilon * s.max() / np.linalg.norm(truth(b0))
    rungs = []
    for width, depth, epochs in ladder:
        layers = _fit_surrogate(X, Y, width, depth, epochs, lr, rng)
        predict = lambda B, L=layers: nc.mlp_forward(L, np.atleast_2d(B))
        approx = float(np.linalg.norm(predict(Xt) - Yt) / np.linalg.norm(Yt))
        adv = single_point_attack(predict, b0, epsilon)
        rungs.append({"width": width, "depth": depth, "epochs": epochs, "approx_error": approx,
                      "adv_error": adv, "gap": adv / approx if approx > 0 else float("inf")})
    non_monotone = [i for i in range(1, len(rungs)) if rungs[i]["approx_error"] >= rungs[i - 1]["approx_error"]]
    final = rungs[-1]["adv_error"]
    return {
        "rungs": rungs,
        "floor": float(floor),
        "kappa": float(s.max() / s.min()),
        "truth_adv_error": single_point_attack(truth, b0, epsilon),
        "non_monotone_rungs": non_monotone,
        "final_adv_error": final,
        "passed": bool(final >= 0.8 * floor),
    }


def desk_operator(m: int = 24, d: int = 6, seed=0):
    """Linear operator with column norms spread over a factor ``kappa`` of 8."""
    rng = np.random.default_rng(seed)
    s = np.geomspace(4.0, 0.5, d)
    G = orthogonal_columns(m, s, rng) + 0.05 * rng.standard_normal((m, d))
    f0 = rng.standard_normal(m) + 3.0
    return G, f0


# -- report ---------------------------------------------------------------------

@dataclass
class TheoryReport:
    checks: list[CheckResult] = field(default_factory=list)
    alpha: dict[str, float] = field(default_factory=dict)
    impossibility: dict | None = None

    @property
    def passed(self) -> bool:
        ok = all(c.passed for c in self.checks)
        return ok and (self.impossibility is None or self.impossibility["passed"])

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks], "alpha": self.alpha,
                "impossibility": self.impossibility}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def random_bound_checks(n: int = 1000, seed=0) -> list[CheckResult]:
    """Upper and lower bounds on ``n`` random Jacobians with ``d <= 34``."""
    rng = np.random.default_rng(seed)
    ups, lows = [], []
    for _ in range(n):
        d = int(rng.integers(1, 35))
        m = int(rng.integers(1, 80))
        J = rng.standard_normal((m, d)) * rng.lognormal(0, 1, d)
        f = rng.standard_normal(m) + rng.uniform(0, 5)
        k = int(rng.integers(1, d + 1))
        eps = float(rng.uniform(0.1, 2))
        ups.append(check_upper_bound(J, float(np.linalg.norm(f)), eps, k, 20, rng.integers(2**32)))
        lows.append(check_lower_bound(J, f, eps, k))
    return [_merge("upper_bound", ups), _merge("lower_bound", lows,
                                               vacuous_fraction=float(np.mean([c.details["vacuous"] for c in lows])))]


def run_suite(seed=0, n_bound: int = 1000, n_rho: int = 10_000, n_two_factor: int = 100,
              impossibility: bool = True) -> TheoryReport:
    """Model-free part of the verification; nonlinear checks are appended by the caller."""
    ss = np.random.SeedSequence(seed).spawn(4)
    rep = TheoryReport()
    rep.checks.extend(random_bound_checks(n_bound, ss[0]))
    rep.checks.append(check_rho_bounds(n=n_rho, seed=ss[1]))
    rep.checks.append(check_two_factor(n_two_factor, seed=ss[2]))
    if impossibility:
        G, f0 = desk_operator(seed=ss[3])
        rep.impossibility = impossibility_experiment(G, np.zeros(G.shape[1]), 0.5, f0=f0, seed=ss[3])
    return rep
