"""Jacobian column-norm profiles and the concentration metrics built on them.

For a model ``f`` at input ``b`` let ``s_i = ||df/db_i||``. The effective
perturbation dimension ``(sum s)^2 / sum s^2`` counts how many inputs carry
the sensitivity, and the sparse attack ratio
``rho(k) = sqrt(sum of the k largest s^2 / ||s||^2)`` is the share of the
dense linear attack that ``k`` coordinates can reach.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .operators import vjp_batch


class FlatModelError(ValueError):
    """Every Jacobian column is zero at this input."""


def jacobian_exact(model, b, trunk, chunk: int = 64) -> np.ndarray:
    """Full Jacobian ``(N*C, d)`` assembled row by row from VJPs."""
    out = model.evaluate(b, trunk)
    return vjp_batch(model, b, trunk, np.eye(out.size), chunk)


def jacobian_randomized(model, b, trunk, n_proj: int = 30, seed=0) -> np.ndarray:
    """Estimate column norms from Gaussian probes.

    With ``g ~ N(0, I)``, ``E[(J^T g)_i^2] = s_i^2``, so the mean of the
    squared VJP entries is unbiased for ``s^2``.
    """
    if n_proj < 1:
        raise ValueError("n_proj must be at least 1")
    out = model.evaluate(b, trunk)
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n_proj, out.size))
    V = vjp_batch(model, b, trunk, G)
    return np.sqrt(np.mean(V**2, axis=0))


def column_norms(J) -> np.ndarray:
    return np.linalg.norm(np.asarray(J, dtype=float), axis=0)


def _check_s(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("s must be a non-empty vector")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError("column norms must be finite and non-negative")
    if not np.any(s > 0):
        raise FlatModelError("all sensitivities are zero: the model is locally constant")
    return s


def _unit_max(s: np.ndarray) -> np.ndarray:
    # both metrics are scale-free; rescaling keeps tiny inputs from underflowing
    return s / s.max()


def d_eff(s) -> float:
    u = _unit_max(_check_s(s))
    return float(u.sum() ** 2 / np.sum(u * u))


def rho_table(s) -> np.ndarray:
    """``rho(k)`` for ``k = 1..d``; the last entry is exactly 1."""
    u = _unit_max(_check_s(s))
    sq = np.sort(u * u)[::-1]
    cum = np.cumsum(sq)
    out = np.sqrt(cum / cum[-1])
    out[-1] = 1.0
    return out


def rho(s, k: int) -> float:
    s = _check_s(s)
    if not 1 <= k <= s.size:
        raise ValueError(f"k must be in [1, {s.size}]")
    return float(rho_table(s)[k - 1])


@dataclass(frozen=True)
class TwoFactor:
    M: float
    rho_k: float
    predicted_error: float


def two_factor(s, f_norm: float, epsilon: float, k: int) -> TwoFactor:
    """Magnitude ``M = eps ||s|| / ||f||`` times concentration ``rho(k)``."""
    s = _check_s(s)
    if f_norm <= 0:
        raise ValueError("f_norm must be positive")
    M = epsilon * float(np.linalg.norm(s)) / f_norm
    r = rho(s, k)
    return TwoFactor(M, r, M * r)


def classify_phase(M: float, rho_k: float, tau: float) -> str:
    """"vulnerable" when the linear prediction ``M * rho_k`` exceeds ``tau``."""
    return "vulnerable" if M * rho_k > tau else "robust"


@dataclass
class SensitivityProfile:
    s: np.ndarray
    d_eff: float
    mean_col_norm: float
    M: float
    rho: np.ndarray
    order: np.ndarray
    S_k: np.ndarray
    f_norm: float
    epsilon: float
    method: str

    def predicted_error(self, k: int) -> float:
        return self.M * float(self.rho[k - 1])

    def to_row(self, sample_id=None) -> dict:
        return {
            "sample_id": sample_id,
            "method": self.method,
            "s": self.s.tolist(),
            "d_eff": self.d_eff,
            "mean_col_norm": self.mean_col_norm,
            "M": self.M,
            "epsilon": self.epsilon,
            "f_norm": self.f_norm,
            "rho": self.rho.tolist(),
            "order": self.order.tolist(),
            "S_k": self.S_k.tolist(),
        }


def profile_from_s(s, f_norm: float, epsilon: float = 1.0, method: str = "given") -> SensitivityProfile:
    s = _check_s(s)
    order = np.argsort(-s, kind="stable")
    return SensitivityProfile(
        s=s,
        d_eff=d_eff(s),
        mean_col_norm=float(s.mean()),
        M=epsilon * float(np.linalg.norm(s)) / f_norm,
        rho=rho_table(s),
        order=order,
        S_k=np.cumsum(s[order]),
        f_norm=float(f_norm),
        epsilon=epsilon,
        method=method,
    )


def profile(model, b, trunk, epsilon: float = 1.0, method: str = "exact", n_proj: int = 30, seed=0):
    """Sensitivity profile of ``model`` at one input."""
    f_norm = float(np.linalg.norm(model.evaluate(b, trunk)))
    if method == "exact":
        s = column_norms(jacobian_exact(model, b, trunk))
    elif method == "randomized":
        s = jacobian_randomized(model, b, trunk, n_proj, seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    return profile_from_s(s, f_norm, epsilon, method)


def profile_samples(model, B, trunk, n_samples: int = 20, method: str = "randomized",
                    n_proj: int = 30, seed=0, epsilon: float = 1.0) -> dict:
    """Profile the first ``n_samples`` rows of ``B``; returns rows and a summary."""
    rows, deffs, Ms = [], [], []
    seeds = np.random.SeedSequence(seed).spawn(min(n_samples, len(B)))
    for i, ss in enumerate(seeds):
        p = profile(model, B[i], trunk, epsilon, method, n_proj, np.random.default_rng(ss))
        rows.append(p.to_row(i))
        deffs.append(p.d_eff)
        Ms.append(p.M)
    return {
        "rows": rows,
        "d_eff_mean": float(np.mean(deffs)),
        "d_eff_std": float(np.std(deffs)),
        "M_mean": float(np.mean(Ms)),
        "n_samples": len(rows),
        "method": method,
        "n_proj": n_proj if method == "randomized" else None,
    }
