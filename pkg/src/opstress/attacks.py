"""Sparse replacement attacks on standardized operator inputs.

An attack picks at most ``k`` input coordinates and overwrites each with a
value in [-1, 1] (one standard deviation of the training data). The damage is
the relative L2 change of the predicted fields against the clean prediction.

Three searchers share that objective: differential evolution (black box),
uniform random sampling, and projected sign-gradient ascent.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from .operators import model_gradient
from .synthdata import feasibility_check

THRESHOLDS = (0.1, 0.2, 0.3, 0.4)
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class GradientUnavailableError(TypeError):
    pass


class ModelEvaluationError(RuntimeError):
    """The model raised or returned non-finite values during an attack."""


# ----------------------------------------------------------------- genome


def decode(genome, d: int):
    """Split ``(zeta_1, delta_1, ..., zeta_k, delta_k)`` into indices and values."""
    g = np.asarray(genome, dtype=float).reshape(-1, 2)
    idx = np.clip(np.rint(g[:, 0]), 0, d - 1).astype(int)
    val = np.clip(g[:, 1], -1.0, 1.0)
    return idx, val


def apply(b_clean, indices, values) -> np.ndarray:
    """Replace ``b[indices] = values`` in pair order, so later pairs win."""
    b = np.array(b_clean, dtype=float, copy=True)
    for i, v in zip(indices, values):
        b[int(i)] = v
    return b


def _apply_batch(b_clean, idx, val) -> np.ndarray:
    B = np.repeat(np.asarray(b_clean, dtype=float)[None], idx.shape[0], axis=0)
    rows = np.arange(idx.shape[0])
    for j in range(idx.shape[1]):
        B[rows, idx[:, j]] = val[:, j]
    return B


def effective_perturbation(b_clean, indices, values) -> dict[int, float]:
    """Coordinates that actually differ from the clean input after replacement."""
    b = apply(b_clean, indices, values)
    changed = np.flatnonzero(b != np.asarray(b_clean))
    return {int(i): float(b[i]) for i in changed}


# ----------------------------------------------------------------- target


class AttackTarget:
    """A model evaluator frozen at one clean input.

    Parameters
    ----------
    evaluator : callable
        Maps ``(n, d)`` inputs to ``(n, N, C)`` predictions.
    b_clean : ndarray, shape (d,)
    """

    def __init__(self, evaluator: Callable, b_clean, sample_id=None, model_name: str = "", model=None, trunk=None):
        self.evaluator = evaluator
        self.b_clean = np.asarray(b_clean, dtype=float)
        self.d = self.b_clean.size
        self.sample_id = sample_id
        self.model_name = model_name
        self.model = model
        self.trunk = trunk
        self.clean = np.asarray(evaluator(self.b_clean[None]))[0]
        self.clean_norm = float(np.linalg.norm(self.clean))
        if not np.isfinite(self.clean_norm) or self.clean_norm == 0:
            raise ValueError("clean prediction must be finite and non-zero")
        self.evaluations = 0

    def predict(self, B) -> np.ndarray:
        B = np.atleast_2d(B)
        self.evaluations += B.shape[0]
        try:
            out = np.asarray(self.evaluator(B))
        except Exception as exc:
            raise ModelEvaluationError(f"model evaluation failed: {exc}") from exc
        if not np.all(np.isfinite(out)):
            raise ModelEvaluationError("model produced non-finite output")
        return out

    def fitness(self, B) -> np.ndarray:
        out = self.predict(B)
        diff = (out - self.clean).reshape(out.shape[0], -1)
        return np.linalg.norm(diff, axis=1) / self.clean_norm

    def channel_errors(self, b) -> list[float]:
        out = np.asarray(self.evaluator(np.atleast_2d(b)))[0]
        num = np.linalg.norm(out - self.clean, axis=0)
        den = np.linalg.norm(self.clean, axis=0)
        return [float(n / d) if d > 0 else float("inf") for n, d in zip(num, den)]


def make_target(model, b_clean, trunk, sample_id=None, name: str | None = None) -> AttackTarget:
    return AttackTarget(model.batch_evaluator(trunk), b_clean, sample_id, name or model.arch, model, trunk)


# ----------------------------------------------------------------- records


@dataclass
class AttackRecord:
    sample_id: int | None
    model: str
    method: str
    k: int
    genome: list[float]
    indices: list[int]
    values: list[float]
    effective_indices: list[int]
    effective_values: list[float]
    fitness: float
    success: dict[str, bool]
    generations: int
    evaluations: int
    trajectory: list[float]
    channel_errors: list[float]
    feasibility: dict
    seed: int | None = None
    valid: bool = True
    error: str | None = None
    stealth: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackRecord":
        return cls(**d)

    def b_adv(self, b_clean) -> np.ndarray:
        return apply(b_clean, self.indices, self.values)


def _success(fitness: float, thresholds) -> dict[str, bool]:
    return {str(t): bool(fitness > t) for t in thresholds}


def _finish(target, method, k, genome, idx, val, fitness, generations, trajectory, thresholds, seed, extra=None):
    b_adv = apply(target.b_clean, idx, val)
    eff = effective_perturbation(target.b_clean, idx, val)
    feas = feasibility_check(b_adv, list(eff))
    return AttackRecord(
        sample_id=target.sample_id,
        model=target.model_name,
        method=method,
        k=k,
        genome=[float(x) for x in genome],
        indices=[int(i) for i in idx],
        values=[float(v) for v in val],
        effective_indices=list(eff),
        effective_values=list(eff.values()),
        fitness=float(fitness),
        success=_success(fitness, thresholds),
        generations=generations,
        evaluations=target.evaluations,
        trajectory=[float(x) for x in trajectory],
        channel_errors=target.channel_errors(b_adv) if idx.size else [0.0] * target.clean.shape[-1],
        feasibility={"in_bounds": feas.in_bounds, "mahalanobis_contrib": feas.mahalanobis_contrib},
        seed=seed,
        extra=extra or {},
    )


def _invalid(target, method, k, thresholds, seed, exc) -> AttackRecord:
    return AttackRecord(
        target.sample_id, target.model_name, method, k, [], [], [], [], [], 0.0,
        _success(0.0, thresholds), 0, target.evaluations, [], [],
        {"in_bounds": True, "mahalanobis_contrib": 0.0}, seed, False, f"{type(exc).__name__}: {exc}",
    )


# ----------------------------------------------------------------- DE


@dataclass(frozen=True)
class DEConfig:
    pop_multiplier: int = 20
    f_low: float = 0.5
    f_high: float = 1.0
    cr: float = 1.0
    max_gen: int = 150
    stall_gen: int = 30
    tol: float = 0.01
    polish: bool = True
    polish_iters: int = 50
    polish_grid: int = 9
    polish_golden_steps: int = 8
    seed: int = 0

    def pop_size(self, k: int) -> int:
        return self.pop_multiplier * 2 * k


def _bounds(k: int, d: int):
    lo = np.tile([0.0, -1.0], k)
    hi = np.tile([float(d - 1), 1.0], k)
    return lo, hi


def _skip(u, excluded):
    """Map ``u`` from ``range(P - len(excluded))`` to ``range(P)`` minus ``excluded``.

    ``excluded`` is a ``(P, 2)`` array of sorted, possibly equal, pairs.
    """
    out = u.copy()
    e0, e1 = excluded[:, 0], excluded[:, 1]
    out += out >= e0
    distinct = e1 != e0
    out += distinct & (out >= e1)
    return out


def _donors(rng, P: int, best: int):
    """Two distinct donor indices per target, both differing from it and from ``best``."""
    i = np.arange(P)
    excluded = np.sort(np.stack([i, np.full(P, best)], axis=1), axis=1)
    m = P - 1 - (i != best)
    u1 = rng.integers(0, m)
    u2 = rng.integers(0, m - 1)
    u2 += u2 >= u1
    return _skip(u1, excluded), _skip(u2, excluded)


def _pad_genome(genome, k: int) -> np.ndarray:
    """Stretch a smaller-``k`` genome to ``k`` pairs by cycling through its pairs.

    Repeated pairs are exact copies, so the decoded perturbation is unchanged.
    """
    pairs = np.asarray(genome, dtype=float).reshape(-1, 2)
    return np.concatenate([pairs[j % len(pairs)] for j in range(k)])


def _polish(target, genome, fitness, k, cfg: DEConfig):
    """Golden-section coordinate ascent on the value genes; indices fixed."""
    d = target.d
    idx, val = decode(genome, d)
    # work on the effective coordinates: the last pair for each index
    owner = {int(i): j for j, i in enumerate(idx)}
    coords = sorted(owner)
    b = apply(target.b_clean, idx, val)
    best_f = fitness
    searches = 0
    while searches < cfg.polish_iters:
        gained = False
        for c in coords:
            if searches >= cfg.polish_iters:
                break
            searches += 1
            grid = np.linspace(-1.0, 1.0, cfg.polish_grid)
            cand = np.repeat(b[None], grid.size, axis=0)
            cand[:, c] = grid
            fg = target.fitness(cand)
            j = int(np.argmax(fg))
            x_best, f_best = grid[j], fg[j]
            step = grid[1] - grid[0]
            lo, hi = max(-1.0, x_best - step), min(1.0, x_best + step)
            x1 = hi - _GOLDEN * (hi - lo)
            x2 = lo + _GOLDEN * (hi - lo)
            trial = b.copy()

            def f_at(x):
                trial[c] = x
                return float(target.fitness(trial[None])[0])

            f1, f2 = f_at(x1), f_at(x2)
            for _ in range(max(0, cfg.polish_golden_steps - 2)):
                if f1 >= f2:
                    hi, x2, f2 = x2, x1, f1
                    x1 = hi - _GOLDEN * (hi - lo)
                    f1 = f_at(x1)
                else:
                    lo, x1, f1 = x1, x2, f2
                    x2 = lo + _GOLDEN * (hi - lo)
                    f2 = f_at(x2)
            for x, fx in ((x1, f1), (x2, f2)):
                if fx > f_best:
                    x_best, f_best = x, fx
            if f_best > best_f:
                b[c] = x_best
                best_f = f_best
                gained = True
        if not gained:
            break
    new = np.asarray(genome, dtype=float).copy().reshape(-1, 2)
    for c in coords:
        for j in np.flatnonzero(idx == c):
            new[j, 1] = b[c]
    return new.ravel(), best_f, searches


def de_attack(target: AttackTarget, k: int, config: DEConfig = DEConfig(),
              thresholds: Sequence[float] = THRESHOLDS, warm_start=None) -> AttackRecord:
    """Differential evolution (best/1/bin) over ``k`` (index, value) pairs.

    The population of ``20 * 2k`` genomes is initialised by Latin hypercube
    sampling. Each generation draws ``F ~ U(f_low, f_high)``, builds
    ``best + F (x_r1 - x_r2)``, crosses over binomially, clips to bounds and
    keeps a trial only if it is strictly better. The run stops once the best
    fitness improved by less than ``tol`` (relative) over ``stall_gen``
    generations, or after ``max_gen`` generations.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    P = config.pop_size(k)
    if P < 4:
        raise ValueError("population must hold at least 4 genomes")
    target.evaluations = 0
    d = target.d
    rng = np.random.default_rng(config.seed)
    lo, hi = _bounds(k, d)
    dim = 2 * k

    def score(pop):
        idx, val = decode(pop, d)
        idx, val = idx.reshape(P, k), val.reshape(P, k)
        return target.fitness(_apply_batch(target.b_clean, idx, val))

    try:
        lhs = qmc.LatinHypercube(d=dim, rng=rng).random(P)
        pop = lo + lhs * (hi - lo)
        if warm_start is not None:
            pop[0] = np.clip(_pad_genome(warm_start, k), lo, hi)
        fit = score(pop)
        best = int(np.argmax(fit))
        trajectory = [float(fit[best])]
        gen = 0
        for gen in range(1, config.max_gen + 1):
            F = rng.uniform(config.f_low, config.f_high)
            r1, r2 = _donors(rng, P, best)
            mutant = pop[best] + F * (pop[r1] - pop[r2])
            cross = rng.random((P, dim)) < config.cr
            cross[np.arange(P), rng.integers(0, dim, size=P)] = True
            trial = np.clip(np.where(cross, mutant, pop), lo, hi)
            f_trial = score(trial)
            better = f_trial > fit
            pop[better] = trial[better]
            fit[better] = f_trial[better]
            best = int(np.argmax(fit))
            trajectory.append(float(fit[best]))
            if gen >= config.stall_gen:
                ref = trajectory[gen - config.stall_gen]
                if (trajectory[-1] - ref) / max(trajectory[-1], 1e-12) < config.tol:
                    break
        genome, best_f = pop[best].copy(), float(fit[best])
        extra = {"pop_size": P, "de_evaluations": target.evaluations}
        if config.polish:
            genome, best_f, searches = _polish(target, genome, best_f, k, config)
            extra["polish_line_searches"] = searches
            extra["polish_evaluations"] = target.evaluations - extra["de_evaluations"]
        idx, val = decode(genome, d)
        return _finish(target, "de", k, genome, idx, val, best_f, gen, trajectory, thresholds, config.seed, extra)
    except ModelEvaluationError as exc:
        return _invalid(target, "de", k, thresholds, config.seed, exc)


# ----------------------------------------------------------------- random


def random_attack(target: AttackTarget, k: int, n_trials: int = 50, seed=0,
                  thresholds: Sequence[float] = THRESHOLDS) -> AttackRecord:
    """Best of ``n_trials`` draws of ``k`` distinct indices with U(-1, 1) values."""
    target.evaluations = 0
    rng = np.random.default_rng(seed)
    d = target.d
    if n_trials <= 0:
        e = np.zeros(0, dtype=int)
        return _finish(target, "random", k, [], e, e.astype(float), 0.0, 0, [], thresholds, seed)
    idx = np.stack([rng.choice(d, size=min(k, d), replace=False) for _ in range(n_trials)])
    val = rng.uniform(-1.0, 1.0, size=idx.shape)
    fits = np.concatenate([
        target.fitness(_apply_batch(target.b_clean, idx[i : i + 256], val[i : i + 256]))
        for i in range(0, n_trials, 256)
    ])
    j = int(np.argmax(fits))
    genome = np.stack([idx[j], val[j]], axis=1).ravel()
    return _finish(target, "random", k, genome, idx[j], val[j], float(fits[j]), 0,
                   np.maximum.accumulate(fits).tolist(), thresholds, seed, {"n_trials": n_trials})


# ----------------------------------------------------------------- PGD


def _project(b, b_clean, k):
    dev = np.abs(b - b_clean)
    keep = np.argsort(-dev, kind="stable")[:k]
    out = b_clean.copy()
    out[keep] = b[keep]
    moved = keep[dev[keep] > 0]
    out[moved] = np.clip(out[moved], -1.0, 1.0)
    return out


def pgd_attack(target: AttackTarget, k: int, iters: int = 100, step: float = 1e-2, restarts: int = 3,
               seed=0, thresholds: Sequence[float] = THRESHOLDS) -> AttackRecord:
    """Projected sign-gradient ascent on the relative L2 damage.

    Each restart perturbs ``k`` random coordinates by ``U(-step, step)``, then
    alternates a signed gradient step with projection onto the k-sparse,
    one-sigma feasible set (keep the ``k`` largest deviations, reset the rest,
    clamp kept coordinates to [-1, 1]).
    """
    model = target.model
    if model is None or not hasattr(model, "backward"):
        raise GradientUnavailableError("PGD needs a model with reverse-mode gradients")
    target.evaluations = 0
    rng = np.random.default_rng(seed)
    b0 = target.b_clean
    d = target.d
    best_f, best_b, trajectory = 0.0, b0.copy(), []
    flat_clean = target.clean.ravel()
    for _ in range(restarts):
        b = b0.copy()
        start = rng.choice(d, size=min(k, d), replace=False)
        b[start] += rng.uniform(-step, step, size=start.size)
        b = _project(b, b0, k)
        for _ in range(iters):
            out = target.predict(b[None])[0].ravel()
            diff = out - flat_clean
            nd = np.linalg.norm(diff)
            f = nd / target.clean_norm
            if f > best_f:
                best_f, best_b = f, b.copy()
            trajectory.append(float(best_f))
            if nd == 0:
                grad = np.zeros(d)
            else:
                grad = model_gradient(model, b, target.trunk, diff / (nd * target.clean_norm))
            b = _project(b + step * np.sign(grad), b0, k)
        f = float(target.fitness(b[None])[0])
        if f > best_f:
            best_f, best_b = f, b.copy()
    changed = np.flatnonzero(best_b != b0)
    genome = np.stack([changed, best_b[changed]], axis=1).ravel()
    return _finish(target, "pgd", k, genome, changed, best_b[changed], best_f, iters * restarts,
                   trajectory, thresholds, seed if isinstance(seed, int) else None,
                   {"step": step, "restarts": restarts})
