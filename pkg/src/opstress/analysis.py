"""Aggregate attack records into success statistics and report tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.stats import norm

from .attacks import THRESHOLDS, AttackRecord, DEConfig, de_attack, make_target

BRANCH_CLASSES = ("B1only", "B2only", "Mixed")


def wilson_ci(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0 <= successes <= n:
        raise ValueError("successes must lie in [0, n]")
    z = float(norm.ppf(0.5 + confidence / 2.0))
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


def classify_branch(indices: Iterable[int], b1_size: int = 2) -> str:
    """Which input group a perturbation touches: operating scalars, profile, or both."""
    idx = set(int(i) for i in indices)
    if not idx:
        raise ValueError("empty index set: the attack changed nothing")
    if all(i < b1_size for i in idx):
        return "B1only"
    if all(i >= b1_size for i in idx):
        return "B2only"
    return "Mixed"


# -- stealth -----------------------------------------------------------------

def channel_summary(out) -> np.ndarray:
    """Spatial mean of each output channel; ``out`` is ``(..., N, C)``."""
    return np.asarray(out, dtype=float).mean(axis=-2)


@dataclass(frozen=True)
class OutputStats:
    """Per-channel mean and std of the channel summary over clean outputs."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_outputs(cls, outputs) -> "OutputStats":
        summ = channel_summary(outputs)
        return cls(summ.mean(axis=0), summ.std(axis=0))

    def z_scores(self, out) -> np.ndarray:
        diff = np.abs(channel_summary(out) - self.mean)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = diff / self.std
        # a constant channel flags any change at all
        return np.where(self.std > 0, z, np.where(diff > 0, np.inf, 0.0))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def stealth_metrics(record: AttackRecord, stats: OutputStats, b_clean, predict: Callable,
                    z_limit: float = 3.0) -> dict:
    """z-score blindness and input-to-output amplification of one attack.

    ``predict`` maps a single standardized input to its ``(N, C)`` output.
    Amplification is ``None`` when the clean input has zero norm.
    """
    b_clean = np.asarray(b_clean, dtype=float)
    b_adv = record.b_adv(b_clean)
    clean = np.asarray(predict(b_clean), dtype=float)
    adv = clean if np.array_equal(b_adv, b_clean) else np.asarray(predict(b_adv), dtype=float)
    z = stats.z_scores(adv)
    out_rel = float(np.linalg.norm(adv - clean) / np.linalg.norm(clean))
    b_norm = float(np.linalg.norm(b_clean))
    if b_norm == 0.0:
        amp = None
    else:
        in_rel = float(np.linalg.norm(b_adv - b_clean)) / b_norm
        amp = 0.0 if in_rel == 0.0 else out_rel / in_rel
    return {
        "z_pass": bool(np.all(z < z_limit)),
        "z_max": float(z.max()),
        "z": z.tolist(),
        "amplification": amp,
    }


# -- transfer and seeds ------------------------------------------------------

def _rel_error(batch_predict, b_clean, B) -> np.ndarray:
    clean = batch_predict(np.asarray(b_clean, dtype=float)[None])[0]
    out = batch_predict(B)
    num = np.linalg.norm((out - clean).reshape(len(B), -1), axis=1)
    return num / np.linalg.norm(clean)


def transfer_matrix(records: Mapping[str, list[AttackRecord]], predictors: Mapping[str, Callable],
                    b_clean: Mapping, tau: float) -> dict:
    """Fraction of each source's successful attacks that also succeed on each target.

    ``predictors`` maps names to batch evaluators ``(n, d) -> (n, N, C)`` and
    ``b_clean`` maps sample ids to clean inputs. Entries are ``None`` when
    the source has no successful attack at ``tau``.
    """
    key = str(tau)
    rates: dict[str, dict[str, float | None]] = {}
    counts: dict[str, int] = {}
    for src, recs in records.items():
        ok = [r for r in recs if r.valid and r.success.get(key, r.fitness > tau)]
        counts[src] = len(ok)
        rates[src] = {}
        for tgt, pred in predictors.items():
            if not ok:
                rates[src][tgt] = None
                continue
            hits = 0
            for r in ok:
                b0 = b_clean[r.sample_id]
                err = _rel_error(pred, b0, r.b_adv(b0)[None])[0]
                hits += bool(err > tau)
            rates[src][tgt] = hits / len(ok)
    return {"tau": tau, "rates": rates, "n": counts}


@dataclass
class SeedSensitivity:
    seeds: list[int]
    rates: dict[str, list[float]]
    mean_errors: list[float]
    rate_std: dict[str, float]
    mean_error_std: float

    @property
    def rate_std_max(self) -> float:
        return max(self.rate_std.values())


def seed_sensitivity(model, samples, k: int, n_seeds: int = 5, trunk=None, config: DEConfig = DEConfig(),
                     thresholds=THRESHOLDS, seeds: list[int] | None = None, name: str = "") -> SeedSensitivity:
    """Re-run DE with several seeds and report the spread of the outcomes.

    Rates are in percentage points; both spreads are population stds.
    """
    seeds = list(range(n_seeds)) if seeds is None else list(seeds)
    if len(seeds) < 2:
        raise ValueError("need at least two seeds")
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    rates = {str(t): [] for t in thresholds}
    means = []
    for s in seeds:
        fits = []
        for i, b in enumerate(samples):
            tgt = make_target(model, b, trunk, sample_id=i, name=name)
            fits.append(de_attack(tgt, k, DEConfig(**{**asdict(config), "seed": s}), thresholds).fitness)
        fits = np.array(fits)
        for t in thresholds:
            rates[str(t)].append(100.0 * float(np.mean(fits > t)))
        means.append(float(fits.mean()))
    return SeedSensitivity(
        seeds=seeds,
        rates=rates,
        mean_errors=means,
        rate_std={t: float(np.std(v)) for t, v in rates.items()},
        mean_error_std=float(np.std(means)),
    )


# -- campaign summaries ------------------------------------------------------

@dataclass
class CampaignSummary:
    model: str
    k: int
    tau: float
    n: int
    successes: int
    rate: float
    ci_low: float
    ci_high: float
    mean_error: float | None
    median_error: float | None
    max_error: float | None
    channel_mean_error: list[float] | None
    branch_fractions: dict[str, float] | None
    z_pass_rate: float | None
    mean_amplification: float | None
    degradation: float | None
    n_invalid: int = 0
    method: str = "de"

    def to_dict(self) -> dict:
        return asdict(self)


def _group(records: Iterable[AttackRecord]) -> dict[tuple[str, int], list[AttackRecord]]:
    groups: dict[tuple[str, int], list[AttackRecord]] = {}
    for r in records:
        groups.setdefault((r.model, r.k), []).append(r)
    return dict(sorted(groups.items()))


def summarize(records: Iterable[AttackRecord], clean_errors: Mapping[str, float] | None = None,
              thresholds=THRESHOLDS, b1_size: int = 2) -> list[CampaignSummary]:
    """One summary per ``(model, k, tau)``; error statistics are over successful attacks."""
    clean_errors = clean_errors or {}
    out = []
    for (model, k), recs in _group(records).items():
        valid = [r for r in recs if r.valid]
        method = recs[0].method
        for tau in thresholds:
            key = str(tau)
            ok = [r for r in valid if r.success.get(key, r.fitness > tau)]
            n, m = len(valid), len(ok)
            lo, hi = wilson_ci(m, n) if n else (float("nan"), float("nan"))
            errs = np.array([r.fitness for r in ok])
            fractions = stealth_pass = amp = chan = None
            if m:
                classes = [classify_branch(r.effective_indices, b1_size) for r in ok]
                fractions = {c: classes.count(c) / m for c in BRANCH_CLASSES}
                chan = np.mean([r.channel_errors for r in ok], axis=0).tolist()
                st = [r.stealth for r in ok if r.stealth]
                if st:
                    stealth_pass = float(np.mean([s["z_pass"] for s in st]))
                    amps = [s["amplification"] for s in st if s.get("amplification") is not None]
                    amp = float(np.mean(amps)) if amps else None
            base = clean_errors.get(model)
            out.append(CampaignSummary(
                model=model, k=k, tau=tau, n=n, successes=m,
                rate=m / n if n else float("nan"), ci_low=lo, ci_high=hi,
                mean_error=float(errs.mean()) if m else None,
                median_error=float(np.median(errs)) if m else None,
                max_error=float(errs.max()) if m else None,
                channel_mean_error=chan, branch_fractions=fractions,
                z_pass_rate=stealth_pass, mean_amplification=amp,
                degradation=float(errs.mean()) / base if m and base else None,
                n_invalid=len(recs) - n, method=method,
            ))
    return out


def paired_dominance(a: Iterable[AttackRecord], b: Iterable[AttackRecord]) -> dict:
    """Share of ``(model, sample, k)`` cells where ``a`` reaches at least ``b``'s fitness."""
    best_b = {(r.model, r.sample_id, r.k): r.fitness for r in b if r.valid}
    wins = total = 0
    for r in a:
        key = (r.model, r.sample_id, r.k)
        if key not in best_b:
            continue
        total += 1
        wins += r.valid and r.fitness >= best_b[key]
    return {"cells": total, "wins": wins, "fraction": wins / total if total else float("nan")}


# -- IO ----------------------------------------------------------------------

def read_jsonl(path) -> list[AttackRecord]:
    with open(path) as fh:
        return [AttackRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_jsonl(records: Iterable[AttackRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def _write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(x, digits=4):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.{digits}f}" if isinstance(x, float) else x


def write_tables(summaries: list[CampaignSummary], out_dir, transfer: list[dict] | None = None,
                 baselines: list[CampaignSummary] | None = None) -> list[Path]:
    """Write the flat CSV tables; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    models = sorted({s.model for s in summaries})
    ks = sorted({s.k for s in summaries})
    taus = sorted({s.tau for s in summaries})
    by = {(s.model, s.k, s.tau): s for s in summaries}
    paths = []

    # rows = model, columns = k, one block per tau
    rows = []
    for tau in taus:
        for m in models:
            rows.append([tau, m] + [_fmt(100 * by[m, k, tau].rate, 1) if (m, k, tau) in by else ""
                                    for k in ks])
    paths.append(_write_csv(out_dir / "success_rates.csv", ["tau", "model"] + [f"k={k}" for k in ks], rows))

    rows = [[s.model, s.k, s.tau, s.n, s.successes, _fmt(100 * s.rate, 1), _fmt(100 * s.ci_low, 1),
             _fmt(100 * s.ci_high, 1), s.n_invalid] for s in summaries]
    paths.append(_write_csv(out_dir / "success_ci.csv",
                            ["model", "k", "tau", "n", "successes", "rate_pct", "ci_low_pct", "ci_high_pct",
                             "invalid"], rows))

    rows = []
    for s in summaries:
        chan = s.channel_mean_error or [None] * 4
        rows.append([s.model, s.k, s.tau, s.successes, _fmt(s.mean_error), _fmt(s.median_error),
                     _fmt(s.max_error), *[_fmt(c) for c in chan], _fmt(s.degradation, 2)])
    paths.append(_write_csv(out_dir / "errors.csv",
                            ["model", "k", "tau", "successes", "mean_eps", "median_eps", "max_eps",
                             "eps_P", "eps_u", "eps_v", "eps_w", "degradation"], rows))

    rows = []
    for s in summaries:
        fr = s.branch_fractions or {}
        rows.append([s.model, s.k, s.tau, s.successes] + [_fmt(100 * fr[c], 1) if c in fr else ""
                                                          for c in BRANCH_CLASSES])
    paths.append(_write_csv(out_dir / "branch_classes.csv",
                            ["model", "k", "tau", "successes", "b1_only_pct", "b2_only_pct", "mixed_pct"], rows))

    rows = [[s.model, s.k, s.tau, s.successes,
             _fmt(100 * s.z_pass_rate, 1) if s.z_pass_rate is not None else "",
             _fmt(s.mean_amplification, 2)] for s in summaries]
    paths.append(_write_csv(out_dir / "stealth.csv",
                            ["model", "k", "tau", "successes", "z_pass_pct", "mean_amplification"], rows))

    if transfer:
        rows = []
        for tm in transfer:
            for src, row in tm["rates"].items():
                for tgt, v in row.items():
                    rows.append([tm["tau"], src, tgt, tm["n"][src], _fmt(100 * v, 1) if v is not None else ""])
        paths.append(_write_csv(out_dir / "transfer.csv", ["tau", "source", "target", "n", "rate_pct"], rows))

    if baselines:
        rows = [[b.method, b.model, b.k, b.tau, b.n, _fmt(100 * b.rate, 1), _fmt(100 * b.ci_low, 1),
                 _fmt(100 * b.ci_high, 1)] for b in baselines]
        paths.append(_write_csv(out_dir / "baselines.csv",
                                ["method", "model", "k", "tau", "n", "rate_pct", "ci_low_pct", "ci_high_pct"],
                                rows))
    return paths
