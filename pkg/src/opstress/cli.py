"""Command-line front end: ``opstress <subcommand> [options]``.

Options come from an optional JSON ``--config`` file and are overridden by
flags. Each command writes ``resolved_config.json`` next to its outputs.
Exit codes: 0 success, 2 configuration error, 3 failed theory check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis as an
from . import pipeline as pl

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3


class ConfigError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


# flag dest -> config key; nested keys use a dot
_FLAG_KEYS = {
    "seed": "seed", "workers": "workers", "n_train": "n_train", "n_test": "n_test", "n_b2": "n_b2",
    "n_points": "n_points", "archs": "archs", "epochs": "train.max_epochs", "k": "ks", "tau": "thresholds",
    "samples": "attack_samples", "trials": "random_trials", "equal_budget_samples": "equal_budget_samples",
    "max_gen": "de.max_gen", "iters": "pgd.iters", "step": "pgd.step", "restarts": "pgd.restarts",
    "profile_samples": "profile_samples", "n_proj": "profile_proj", "epsilon": "epsilon",
    "pgd_samples": "pgd_samples",
}


def resolve_config(args) -> pl.PipelineConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    for dest, key in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if "." in key:
            outer, inner = key.split(".")
            raw.setdefault(outer, {})[inner] = value
        else:
            raw[key] = value
    if getattr(args, "command", None) == "baseline-pgd" and "pgd_samples" not in raw:
        raw["pgd_samples"] = raw.get("attack_samples", pl.PipelineConfig.attack_samples)
    try:
        return pl.PipelineConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _models(args) -> dict[str, Path]:
    paths = [Path(p) for p in (args.model or [])]
    if getattr(args, "models", None):
        paths += sorted(Path(args.models).glob("*.ckpt"))
    if not paths:
        raise ConfigError("no checkpoints given (use --model or --models)")
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise ConfigError(f"missing checkpoint(s): {missing}")
    return {pl.model_name(p): p for p in paths}


def _data(args) -> Path:
    path = Path(args.data)
    if not (path / "manifest.json").is_file():
        raise ConfigError(f"{path} is not a dataset directory")
    return path


def _snapshot(cfg: pl.PipelineConfig, out) -> None:
    pl.write_json(Path(out) / "resolved_config.json", cfg.to_dict())


# ---------------------------------------------------------------- commands


def cmd_generate(args, cfg):
    pl.generate_data(cfg, args.out)
    _snapshot(cfg, args.out)


def cmd_train(args, cfg):
    pl.train_models(cfg, _data(args), args.out)
    _snapshot(cfg, args.out)


def cmd_attack(args, cfg):
    pl.run_attacks(cfg, _data(args), _models(args), args.out)
    _snapshot(cfg, args.out)


def cmd_random(args, cfg):
    pl.run_random(cfg, _data(args), _models(args), args.out, args.equal_budget_from)
    _snapshot(cfg, args.out)


def cmd_pgd(args, cfg):
    pl.run_pgd(cfg, _data(args), _models(args), args.out)
    _snapshot(cfg, args.out)


def cmd_profile(args, cfg):
    pl.profile_models(cfg, _data(args), _models(args), args.out)
    _snapshot(cfg, args.out)


def cmd_analyze(args, cfg):
    pl.analyze(cfg, _data(args), _models(args), args.attacks, args.out, args.baselines or ())
    _snapshot(cfg, args.out)


def cmd_transfer(args, cfg):
    records = pl._load_records(args.attacks, "de")
    pl.write_json(Path(args.out) / "transfer.json", pl.transfer_stage(cfg, _data(args), _models(args), records))
    _snapshot(cfg, args.out)


def cmd_theory(args, cfg):
    models = _models(args) if (args.model or args.models) else None
    data = _data(args) if args.data else None
    rep = pl.verify_theory(cfg, args.out, data, models)
    _snapshot(cfg, args.out)
    for c in rep.checks:
        print(f"{c.name}: {'pass' if c.passed else 'FAIL'} (trials={c.trials}, worst slack={c.worst_slack:.3g})")
    if rep.impossibility is not None:
        print(f"impossibility: {'pass' if rep.impossibility['passed'] else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_CHECK


def cmd_report(args, cfg):
    src = Path(args.analysis) / "summary.json"
    if not src.is_file():
        raise ConfigError(f"{src} not found; run analyze first")
    data = json.loads(src.read_text())
    summaries = [an.CampaignSummary(**s) for s in data["summaries"]]
    baselines = [an.CampaignSummary(**s) for s in data.get("baselines", [])]
    for p in an.write_tables(summaries, args.out, data.get("transfer"), baselines):
        print(p)


def cmd_pipeline(args, cfg):
    res = pl.run_pipeline(cfg, args.out)
    print(json.dumps(res["timings"], indent=2))
    rep = json.loads((Path(args.out) / "theory" / "theory_report.json").read_text()) if cfg.theory else None
    return EXIT_CHECK if rep is not None and not rep["passed"] else EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opstress", description="Sparse adversarial stress tests for neural operators.")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, data=True, models=False):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=fn)
        sp.add_argument("--config", help="JSON file of pipeline options; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help=f"worker processes (env {pl.WORKERS_ENV} overrides)")
        sp.add_argument("--out", required=True)
        if data:
            sp.add_argument("--data", required=name != "verify-theory", help="dataset directory")
        if models:
            sp.add_argument("--model", action="append", help="checkpoint file; repeat for several")
            sp.add_argument("--models", help="directory of checkpoints")
        return sp

    sp = add("generate-data", cmd_generate, "write the synthetic dataset", data=False)
    for flag in ("--n-train", "--n-test", "--n-b2", "--n-points"):
        sp.add_argument(flag, type=int)

    sp = add("train", cmd_train, "train the operator models")
    sp.add_argument("--archs", type=lambda s: s.split(","))
    sp.add_argument("--epochs", type=int)

    def attack_flags(sp):
        sp.add_argument("--k", type=_int_list, help="comma-separated sparsity budgets")
        sp.add_argument("--tau", type=_float_list, help="comma-separated success thresholds")
        sp.add_argument("--samples", type=int)

    sp = add("attack", cmd_attack, "differential evolution campaign", models=True)
    attack_flags(sp)
    sp.add_argument("--max-gen", type=int)

    sp = add("baseline-random", cmd_random, "random sparse baseline", models=True)
    attack_flags(sp)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--equal-budget-from", help="DE campaign directory to copy per-cell budgets from")
    sp.add_argument("--equal-budget-samples", type=int)

    sp = add("baseline-pgd", cmd_pgd, "projected gradient baseline", models=True)
    attack_flags(sp)
    for flag, typ in (("--iters", int), ("--step", float), ("--restarts", int)):
        sp.add_argument(flag, type=typ)

    sp = add("profile", cmd_profile, "Jacobian sensitivity profiles", models=True)
    sp.add_argument("--profile-samples", type=int)
    sp.add_argument("--n-proj", type=int)
    sp.add_argument("--epsilon", type=float)

    sp = add("analyze", cmd_analyze, "campaign statistics and tables", models=True)
    sp.add_argument("--attacks", required=True)
    sp.add_argument("--baselines", action="append")
    sp.add_argument("--tau", type=_float_list)

    sp = add("transfer", cmd_transfer, "cross-model transfer rates", models=True)
    sp.add_argument("--attacks", required=True)
    sp.add_argument("--tau", type=_float_list)

    sp = add("verify-theory", cmd_theory, "numerical checks of the attack bounds", models=True)
    sp.add_argument("--epsilon", type=float)

    sp = add("report", cmd_report, "render CSV tables from an analysis directory", data=False)
    sp.add_argument("--analysis", required=True)

    sp = add("pipeline", cmd_pipeline, "run every stage in order", data=False)
    sp.add_argument("--pgd-samples", type=int)
    sp.add_argument("--equal-budget-samples", type=int)
    attack_flags(sp)
    sp.add_argument("--epochs", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        code = args.func(args, cfg)
    except ConfigError as exc:
        print(f"opstress: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
