"""Stage functions for the desk benchmark.

Every stage reads its inputs from directories and writes to its own output
directory, so stages compose as a DAG. All randomness flows from one global
seed through :func:`derive_seed`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import analysis as an
from . import attacks as at
from . import operators as ops
from . import sensitivity as sn
from . import synthdata as sd
from . import theory as th
from . import training as tr

log = logging.getLogger("opstress")

WORKERS_ENV = "OPSTRESS_WORKERS"


def derive_seed(seed: int, *names) -> int:
    """Stable 63-bit seed for a named stage, e.g. ``derive_seed(42, "de", "nomad", 3, 5)``."""
    text = ":".join(str(x) for x in (seed, *names))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(directory) -> dict[str, str]:
    """``relative path -> sha256`` for every file below ``directory``."""
    root = Path(directory)
    return {str(p.relative_to(root)): sha256_file(p) for p in sorted(root.rglob("*")) if p.is_file()}


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path


def resolve_workers(workers: int | None) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return max(1, int(workers or 1))


# ---------------------------------------------------------------- config


@dataclass
class PipelineConfig:
    seed: int = 42
    n_train: int = 200
    n_test: int = 50
    n_b2: int = 32
    n_points: int = 256
    archs: tuple = ops.ARCHS
    train: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    ks: tuple = (1, 3, 5, 10)
    thresholds: tuple = at.THRESHOLDS
    attack_samples: int = 50
    de: dict = field(default_factory=dict)
    random_trials: int = 50
    equal_budget_samples: int = 50
    pgd_samples: int = 0
    pgd: dict = field(default_factory=lambda: {"iters": 100, "step": 1e-2, "restarts": 3})
    profile_samples: int = 20
    profile_proj: int = 30
    epsilon: float = 1.0
    theory: bool = True
    theory_samples: int = 3
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("archs", "ks", "thresholds"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        bad = set(cfg.archs) - set(ops.ARCHS)
        if bad:
            raise ValueError(f"unknown architectures: {sorted(bad)}")
        if any(k < 1 for k in cfg.ks):
            raise ValueError("every k must be at least 1")
        return cfg

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("archs", "ks", "thresholds"):
            out[key] = list(out[key])
        return out

    def train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig.from_dict({"seed": derive_seed(self.seed, "train") % 2**31, **self.train})

    def arch_config(self) -> ops.ArchConfig:
        return ops.ArchConfig.from_dict({**ops.ArchConfig().to_dict(), **self.arch})

    def de_config(self) -> at.DEConfig:
        return at.DEConfig(**self.de)


# ---------------------------------------------------------------- stages


def generate_data(cfg: PipelineConfig, out) -> Path:
    ds = sd.generate_dataset(cfg.n_train, cfg.n_test, cfg.n_b2, cfg.n_points, derive_seed(cfg.seed, "data"))
    path = sd.save_dataset(ds, out)
    log.info("dataset written to %s (d=%d, N=%d)", path, ds.d, ds.n_points)
    return path


def train_models(cfg: PipelineConfig, data_dir, out) -> dict[str, Path]:
    ds = sd.load_dataset(data_dir)
    out = Path(out)
    paths = {}
    for arch in cfg.archs:
        t0 = time.perf_counter()
        model, report = tr.train(arch, ds, cfg.train_config(), cfg.arch_config())
        paths[arch] = ops.save_checkpoint(model, out / f"{arch}.ckpt", ds.normalizer.to_dict(),
                                          {"train_report": report.to_dict()})
        log.info("%s: rel L2 %.4f after %d epochs (%.1fs)", arch, report.test_rel_l2, report.epochs_run,
                 time.perf_counter() - t0)
    return paths


def _test_inputs(data_dir):
    ds = sd.load_dataset(data_dir)
    te = ds.standardized("test")
    return ds, te


def model_name(path) -> str:
    return Path(path).stem


# Worker state: loaded once per process.
_WORKER: dict = {}


def _init_worker(model_paths: dict, data_dir: str):
    _WORKER.clear()
    _, te = _test_inputs(data_dir)
    _WORKER["b"] = te.b
    _WORKER["trunk"] = te.trunk_norm
    _WORKER["models"] = {n: ops.load_checkpoint(p)[0] for n, p in model_paths.items()}
    _WORKER["stats"] = {}
    for n, m in _WORKER["models"].items():
        _WORKER["stats"][n] = an.OutputStats.from_outputs(m.batch_evaluator(te.trunk_norm)(te.b))


def _target(name: str, i: int) -> at.AttackTarget:
    return at.make_target(_WORKER["models"][name], _WORKER["b"][i], _WORKER["trunk"], sample_id=i, name=name)


def _with_stealth(rec: at.AttackRecord, name: str, target: at.AttackTarget) -> at.AttackRecord:
    if rec.valid:
        predict = lambda b: target.evaluator(np.atleast_2d(b))[0]
        rec.stealth = an.stealth_metrics(rec, _WORKER["stats"][name], target.b_clean, predict)
    return rec


def _de_task(task) -> list[dict]:
    """All ``k`` for one (model, sample), ascending, each warm-started from the last."""
    name, i, ks, thresholds, de_cfg, seed = task
    target = _target(name, i)
    out, warm = [], None
    for k in ks:
        cfg = at.DEConfig(**{**de_cfg, "seed": derive_seed(seed, "de", name, i, k)})
        rec = at.de_attack(target, k, cfg, thresholds, warm_start=warm)
        if rec.valid:
            warm = rec.genome
        out.append(_with_stealth(rec, name, target).to_dict())
    return out


def _random_task(task) -> list[dict]:
    name, i, ks, thresholds, budgets, seed, tag = task
    target = _target(name, i)
    out = []
    for k, n_trials in zip(ks, budgets):
        rec = at.random_attack(target, k, n_trials, derive_seed(seed, tag, name, i, k), thresholds)
        rec.method = tag
        out.append(_with_stealth(rec, name, target).to_dict())
    return out


def _pgd_task(task) -> list[dict]:
    name, i, ks, thresholds, pgd_cfg, seed = task
    target = _target(name, i)
    return [_with_stealth(at.pgd_attack(target, k, seed=derive_seed(seed, "pgd", name, i, k),
                                        thresholds=thresholds, **pgd_cfg), name, target).to_dict()
            for k in ks]


def _run_tasks(fn, tasks, model_paths, data_dir, workers) -> list[list[dict]]:
    model_paths = {n: str(p) for n, p in model_paths.items()}
    if workers <= 1:
        _init_worker(model_paths, str(data_dir))
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(model_paths, str(data_dir))) as pool:
        # map keeps submission order, so files come out sorted by (sample, k)
        return list(pool.map(fn, tasks, chunksize=1))


def _write_campaign(results, ks, out, prefix) -> dict[str, str]:
    """One JSON-lines file per (model, k); records ordered by sample."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files: dict[tuple[str, int], list[str]] = {}
    for chunk in results:
        for rec in chunk:
            files.setdefault((rec["model"], rec["k"]), []).append(json.dumps(rec, sort_keys=True))
    written = {}
    for (name, k), lines in sorted(files.items()):
        path = out / f"{prefix}_{name}_k{k}.jsonl"
        path.write_text("\n".join(lines) + "\n")
        written[f"{name}/k{k}"] = path.name
    return written


def run_attacks(cfg: PipelineConfig, data_dir, model_paths: dict, out) -> dict:
    workers = resolve_workers(cfg.workers)
    n = min(cfg.attack_samples, cfg.n_test)
    tasks = [(name, i, tuple(sorted(cfg.ks)), tuple(cfg.thresholds), asdict(cfg.de_config()), cfg.seed)
             for name in model_paths for i in range(n)]
    t0 = time.perf_counter()
    results = _run_tasks(_de_task, tasks, model_paths, data_dir, workers)
    files = _write_campaign(results, cfg.ks, out, "de")
    log.info("DE campaign: %d tasks in %.1fs with %d worker(s)", len(tasks), time.perf_counter() - t0, workers)
    write_json(Path(out) / "manifest.json", {"method": "de", "samples": n, "models": sorted(model_paths),
                                             "ks": sorted(cfg.ks), "files": files})
    return files


def run_random(cfg: PipelineConfig, data_dir, model_paths: dict, out, de_dir=None) -> dict:
    """Fixed-trial random baseline on every cell, plus an equal-budget run.

    The equal-budget run gives each cell as many random draws as DE used on
    it, for the first ``equal_budget_samples`` samples.
    """
    workers = resolve_workers(cfg.workers)
    n = min(cfg.attack_samples, cfg.n_test)
    ks = tuple(sorted(cfg.ks))
    tasks = [(name, i, ks, tuple(cfg.thresholds), (cfg.random_trials,) * len(ks), cfg.seed, "random")
             for name in model_paths for i in range(n)]
    files = _write_campaign(_run_tasks(_random_task, tasks, model_paths, data_dir, workers), ks, out, "random")
    m = min(cfg.equal_budget_samples, n)
    if de_dir is not None and m > 0:
        budget = {}
        for path in sorted(Path(de_dir).glob("de_*.jsonl")):
            for r in an.read_jsonl(path):
                budget[r.model, r.sample_id, r.k] = r.evaluations
        tasks = [(name, i, ks, tuple(cfg.thresholds), tuple(budget[name, i, k] for k in ks), cfg.seed,
                  "random_equal") for name in model_paths for i in range(m)]
        files.update({f"equal/{k}": v for k, v in _write_campaign(
            _run_tasks(_random_task, tasks, model_paths, data_dir, workers), ks, out, "random_equal").items()})
    write_json(Path(out) / "manifest.json", {"method": "random", "samples": n, "equal_budget_samples": m,
                                             "trials": cfg.random_trials, "files": files})
    return files


def run_pgd(cfg: PipelineConfig, data_dir, model_paths: dict, out) -> dict:
    n = min(cfg.pgd_samples, cfg.n_test)
    ks = tuple(sorted(cfg.ks))
    tasks = [(name, i, ks, tuple(cfg.thresholds), dict(cfg.pgd), cfg.seed) for name in model_paths
             for i in range(n)]
    files = _write_campaign(_run_tasks(_pgd_task, tasks, model_paths, data_dir, resolve_workers(cfg.workers)),
                            ks, out, "pgd")
    write_json(Path(out) / "manifest.json", {"method": "pgd", "samples": n, "files": files, **cfg.pgd})
    return files


def profile_models(cfg: PipelineConfig, data_dir, model_paths: dict, out) -> dict:
    _, te = _test_inputs(data_dir)
    out = Path(out)
    summary = {}
    for name, path in model_paths.items():
        model = ops.load_checkpoint(path)[0]
        res = sn.profile_samples(model, te.b, te.trunk_norm, cfg.profile_samples, "randomized",
                                 cfg.profile_proj, derive_seed(cfg.seed, "profile", name), cfg.epsilon)
        write_json(out / f"{name}.json", res)
        summary[name] = {k: res[k] for k in ("d_eff_mean", "d_eff_std", "M_mean", "n_samples")}
    write_json(out / "summary.json", summary)
    return summary


def _load_records(directory, prefix) -> list[at.AttackRecord]:
    recs = []
    for path in sorted(Path(directory).glob(f"{prefix}_*.jsonl")):
        recs.extend(an.read_jsonl(path))
    return recs


def analyze(cfg: PipelineConfig, data_dir, model_paths: dict, de_dir, out, baseline_dirs=()) -> dict:
    """Summaries, paired DE-versus-baseline comparisons and CSV tables."""
    out = Path(out)
    de = _load_records(de_dir, "de")
    clean = {}
    for name, path in model_paths.items():
        header = ops.load_checkpoint(path)[1]
        clean[name] = header.get("extra", {}).get("train_report", {}).get("test_rel_l2")
    summaries = an.summarize(de, clean, cfg.thresholds)
    baselines, comparisons = [], {}
    for bdir in baseline_dirs:
        for prefix in ("random_equal", "random", "pgd"):
            recs = [r for r in _load_records(bdir, prefix) if r.method == prefix]
            if not recs:
                continue
            baselines.extend(an.summarize(recs, clean, cfg.thresholds))
            comparisons[prefix] = an.paired_dominance(de, recs)
    transfer = transfer_stage(cfg, data_dir, model_paths, de)
    an.write_tables(summaries, out, transfer, baselines)
    feas = [r.feasibility for r in de if r.valid]
    result = {
        "summaries": [s.to_dict() for s in summaries],
        "baselines": [b.to_dict() for b in baselines],
        "de_vs_baseline": comparisons,
        "transfer": transfer,
        "clean_rel_l2": clean,
        "records": len(de),
        "invalid": sum(not r.valid for r in de),
        "feasible": sum(f["in_bounds"] and f["mahalanobis_contrib"] <= r.k for f, r in
                        zip(feas, [r for r in de if r.valid])),
    }
    write_json(out / "summary.json", result)
    return result


def transfer_stage(cfg: PipelineConfig, data_dir, model_paths: dict, de_records) -> list[dict]:
    _, te = _test_inputs(data_dir)
    preds = {n: ops.load_checkpoint(p)[0].batch_evaluator(te.trunk_norm) for n, p in model_paths.items()}
    by_src: dict[str, list] = {}
    for r in de_records:
        if r.model in preds:
            by_src.setdefault(r.model, []).append(r)
    b_clean = dict(enumerate(te.b))
    return [an.transfer_matrix(by_src, preds, b_clean, tau) for tau in cfg.thresholds]


def verify_theory(cfg: PipelineConfig, out, data_dir=None, model_paths: dict | None = None) -> th.TheoryReport:
    rep = th.run_suite(derive_seed(cfg.seed, "theory"))
    if data_dir is not None and model_paths:
        _, te = _test_inputs(data_dir)
        B = te.b[: cfg.theory_samples]
        for name, path in model_paths.items():
            model = ops.load_checkpoint(path)[0]
            rep.alpha[name] = th.measure_linearization(model, B, cfg.epsilon, 3, 20, te.trunk_norm,
                                                       derive_seed(cfg.seed, "alpha", name))
            if model.arch == "poddeeponet":
                check = th.check_pod_ceiling(model, B, cfg.epsilon, 3, 50, te.trunk_norm,
                                             derive_seed(cfg.seed, "pod", name))
                check.name = f"pod_ceiling[{name}]"
                rep.checks.append(check)
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "theory_report.json").write_text(rep.to_json())
    log.info("theory suite %s", "passed" if rep.passed else "FAILED")
    return rep


def run_pipeline(cfg: PipelineConfig, out) -> dict:
    """Every stage in order; returns stage timings and the output hashes."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "resolved_config.json", cfg.to_dict())
    timings = {}

    def timed(name, fn, *args):
        t0 = time.perf_counter()
        res = fn(*args)
        timings[name] = time.perf_counter() - t0
        return res

    data = out / "data"
    timed("generate", generate_data, cfg, data)
    models = timed("train", train_models, cfg, data, out / "models")
    timed("attack", run_attacks, cfg, data, models, out / "attacks")
    timed("baseline_random", run_random, cfg, data, models, out / "baselines", out / "attacks")
    baseline_dirs = [out / "baselines"]
    if cfg.pgd_samples > 0:
        timed("baseline_pgd", run_pgd, cfg, data, models, out / "pgd")
        baseline_dirs.append(out / "pgd")
    timed("profile", profile_models, cfg, data, models, out / "profiles")
    timed("analyze", analyze, cfg, data, models, out / "attacks", out / "analysis", baseline_dirs)
    if cfg.theory:
        timed("theory", verify_theory, cfg, out / "theory", data, models)
    write_json(out / "timings.json", timings)
    return {"timings": timings, "hashes": {d: hash_tree(out / d) for d in ("data", "models", "attacks")}}
