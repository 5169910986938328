"""Mini-batch Adam training with plateau LR decay and early stopping."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from . import operators as ops
from .synthdata import CHANNELS, Dataset


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-6
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    min_lr: float = 1e-7
    batch_size: int = 8
    max_epochs: int = 150
    early_stop_patience: int = 50
    dropout: float = 0.1
    val_fraction: float = 0.1
    seed: int = 42

    def __post_init__(self):
        rates = (self.lr, self.eps, self.min_lr, self.plateau_factor, self.val_fraction)
        if any(r <= 0 for r in rates) or self.weight_decay < 0 or not 0 <= self.dropout < 1:
            raise ValueError("rates must be positive and dropout in [0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1 or self.batch_size < 1:
            raise ValueError("patience and batch size must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class TrainReport:
    arch: str
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    lr_events: list[dict] = field(default_factory=list)
    epochs_run: int = 0
    best_epoch: int = -1
    best_val_mse: float = float("inf")
    test_rel_l2: float = float("nan")
    test_rel_l2_per_channel: dict = field(default_factory=dict)
    n_parameters: int = 0
    metric_space: str = "normalized"
    pod_rank: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class PlateauScheduler:
    """Multiply the LR by ``factor`` once the monitored value has failed to
    improve (relative threshold 1e-4) for more than ``patience`` epochs."""

    def __init__(self, lr: float, factor: float, patience: int, min_lr: float, threshold: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, value: float) -> bool:
        """Record one epoch; return True if the LR was reduced."""
        if value < self.best * (1.0 - self.threshold):
            self.best = value
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.bad_epochs = 0
            new = max(self.lr * self.factor, self.min_lr)
            if self.lr - new > 1e-12:
                self.lr = new
                return True
        return False


def relative_l2(pred, ref, channel: int | None = None) -> float:
    """``||pred - ref|| / ||ref||`` over all entries, or one channel column."""
    pred = np.asarray(pred, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if channel is not None:
        pred, ref = pred[..., channel], ref[..., channel]
    denom = np.linalg.norm(ref)
    if denom == 0:
        raise ZeroDivisionError("reference field has zero norm")
    return float(np.linalg.norm(pred - ref) / denom)


def held_out_errors(model, b, trunk, targets) -> tuple[float, dict]:
    """Per-sample relative L2 averaged over samples; aggregate and per channel."""
    pred = model.batch_evaluator(trunk)(b)
    agg = float(np.mean([relative_l2(p, t) for p, t in zip(pred, targets)]))
    per = {
        CHANNELS[c] if c < len(CHANNELS) else str(c): float(
            np.mean([relative_l2(p, t, c) for p, t in zip(pred, targets)])
        )
        for c in range(targets.shape[-1])
    }
    return agg, per


def _mse(model, b, trunk, y, chunk: int = 64) -> float:
    fast = model.batch_evaluator(trunk, chunk)
    return float(np.mean((fast(b) - y) ** 2))


def fit(model, b, trunk, targets, config: TrainConfig, report: TrainReport | None = None):
    """Train ``model`` in place on standardized arrays.

    The last ``val_fraction`` of the samples is held out for LR scheduling,
    early stopping and best-weight selection.
    """
    n = b.shape[0]
    if n < 2:
        raise ValueError("need at least two training samples to hold out a validation split")
    n_val = min(n - 1, max(1, int(round(config.val_fraction * n))))
    n_fit = n - n_val
    bf, yf, bv, yv = b[:n_fit], targets[:n_fit], b[n_fit:], targets[n_fit:]

    report = report or TrainReport(model.arch)
    report.n_parameters = int(sum(a.size for _, a in model.parameters()))
    params = [a for _, a in model.parameters()]
    state = nc.AdamState.zeros_like(params)
    sched = PlateauScheduler(config.lr, config.plateau_factor, config.plateau_patience, config.min_lr)
    shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    best = [p.copy() for p in params]
    since_best = 0

    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(n_fit)
        total = 0.0
        for start in range(0, n_fit, config.batch_size):
            idx = order[start : start + config.batch_size]
            out, rec = model.forward(bf[idx], trunk, dropout_rng, config.dropout, record=True)
            diff = out - yf[idx]
            loss = float(np.mean(diff**2))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"{model.arch}: loss became {loss} at epoch {epoch}, batch starting {start}; "
                    f"lr={sched.lr:g}. Lower the learning rate or check the inputs."
                )
            total += loss * idx.size
            grads, _ = model.backward(rec, 2.0 * diff / diff.size)
            nc.adam_step(params, grads, state, sched.lr, *config.betas, config.eps, config.weight_decay)
        val = _mse(model, bv, trunk, yv)
        report.train_mse.append(total / n_fit)
        report.val_mse.append(val)
        report.epochs_run = epoch + 1
        if val < report.best_val_mse:
            report.best_val_mse = val
            report.best_epoch = epoch
            best = [p.copy() for p in params]
            since_best = 0
        else:
            since_best += 1
        if sched.step(val):
            report.lr_events.append({"epoch": epoch, "lr": sched.lr})
        if since_best >= config.early_stop_patience:
            break

    for p, saved in zip(params, best):
        p[...] = saved
    return model, report


def train(arch: str, dataset: Dataset, config: TrainConfig, arch_config: ops.ArchConfig | None = None):
    """Build, fit and score one architecture on ``dataset``.

    Returns
    -------
    (model, TrainReport)
    """
    arch_config = arch_config or ops.ArchConfig()
    tr = dataset.standardized("train")
    te = dataset.standardized("test")
    n_fit = tr.b.shape[0] - min(tr.b.shape[0] - 1, max(1, int(round(config.val_fraction * tr.b.shape[0]))))
    init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, ops.ARCHS.index(arch)]))
    pod = None
    if arch == "poddeeponet":
        snaps = np.transpose(tr.targets_norm[:n_fit], (2, 1, 0))  # (C, N, M)
        pod = ops.build_pod_basis(snaps, arch_config.pod_energy, arch_config.pod_max_rank)
        pod.grid = tr.trunk_norm.copy()
    model = ops.build_model(arch, dataset.d, tr.targets_norm.shape[-1], init_rng, arch_config, pod)
    report = TrainReport(arch, pod_rank=pod.rank if pod else None)
    fit(model, tr.b, tr.trunk_norm, tr.targets_norm, config, report)
    report.test_rel_l2, report.test_rel_l2_per_channel = held_out_errors(
        model, te.b, te.trunk_norm, te.targets_norm
    )
    return model, report
