"""Synthetic channel-flow benchmark and the normalization it is trained under.

Each sample maps two global scalars (inlet velocity, inlet temperature) and a
discretised wall heat-flux profile to four fields (P, u, v, w) on a regular
(x, z) grid. The ground-truth operator is a closed-form expression so that the
dataset is cheap, smooth and bit-reproducible from a seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHANNELS = ("P", "u", "v", "w")
V_RANGE = (4.0, 5.0)
T_RANGE = (263.0, 323.0)
QMAX_RANGE = (8000.0, 20000.0)


class DegenerateStatisticsError(ValueError):
    """A fitted scale came out as zero."""


@dataclass(frozen=True)
class RawSample:
    v_in: float
    T_in: float
    q_max: float
    q_profile: np.ndarray
    trunk: np.ndarray
    fields: np.ndarray


@dataclass
class RawSplit:
    """Samples of one split stored column-wise.

    Attributes
    ----------
    branch1 : ndarray, shape (n, 2)
        ``(v_in, T_in)`` per sample.
    q_max : ndarray, shape (n,)
    branch2 : ndarray, shape (n, n_b2)
        Heat flux at the sensor locations.
    fields : ndarray, shape (n, N, 4)
    """

    branch1: np.ndarray
    q_max: np.ndarray
    branch2: np.ndarray
    fields: np.ndarray

    def __len__(self) -> int:
        return self.branch1.shape[0]

    def sample(self, i: int, trunk: np.ndarray) -> RawSample:
        return RawSample(
            float(self.branch1[i, 0]),
            float(self.branch1[i, 1]),
            float(self.q_max[i]),
            self.branch2[i].copy(),
            trunk,
            self.fields[i].copy(),
        )


@dataclass(frozen=True)
class Normalizer:
    branch1_mean: np.ndarray
    branch1_std: np.ndarray
    branch2_mean: float
    branch2_std: float
    trunk_min: np.ndarray
    trunk_max: np.ndarray
    field_min: np.ndarray
    field_max: np.ndarray

    def input_mean(self, n_b2: int) -> np.ndarray:
        return np.concatenate([self.branch1_mean, np.full(n_b2, self.branch2_mean)])

    def input_std(self, n_b2: int) -> np.ndarray:
        return np.concatenate([self.branch1_std, np.full(n_b2, self.branch2_std)])

    def to_dict(self) -> dict:
        return {
            "branch1_mean": self.branch1_mean.tolist(),
            "branch1_std": self.branch1_std.tolist(),
            "branch2_mean": float(self.branch2_mean),
            "branch2_std": float(self.branch2_std),
            "trunk_min": self.trunk_min.tolist(),
            "trunk_max": self.trunk_max.tolist(),
            "field_min": self.field_min.tolist(),
            "field_max": self.field_max.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        arr = lambda k: np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(
            arr("branch1_mean"),
            arr("branch1_std"),
            float(d["branch2_mean"]),
            float(d["branch2_std"]),
            arr("trunk_min"),
            arr("trunk_max"),
            arr("field_min"),
            arr("field_max"),
        )


@dataclass
class StandardizedSplit:
    """Model-space view of a split.

    ``b[:, :2]`` holds the global scalars and ``b[:, 2:]`` the flux profile.
    """

    b: np.ndarray
    trunk_norm: np.ndarray
    targets_norm: np.ndarray

    def __len__(self) -> int:
        return self.b.shape[0]


@dataclass
class Dataset:
    train: RawSplit
    test: RawSplit
    normalizer: Normalizer
    trunk: np.ndarray
    sensors: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n_b2(self) -> int:
        return self.sensors.size

    @property
    def d(self) -> int:
        return 2 + self.n_b2

    @property
    def n_points(self) -> int:
        return self.trunk.shape[0]

    def standardized(self, split: str) -> StandardizedSplit:
        raw = self.train if split == "train" else self.test
        return standardize_split(raw, self.trunk, self.normalizer)


@dataclass(frozen=True)
class FeasibilityReport:
    in_bounds: bool
    mahalanobis_contrib: float


def sensor_locations(n_b2: int) -> np.ndarray:
    """Cell-centred sensor positions on [0, 1]."""
    return (np.arange(n_b2) + 0.5) / n_b2


def make_grid(N: int) -> np.ndarray:
    side = math.isqrt(N)
    if side * side != N:
        raise ValueError(f"N={N} is not a perfect square")
    axis = np.linspace(0.0, 1.0, side)
    zz, xx = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([xx.ravel(), zz.ravel()], axis=1)


def heat_flux(q_max, z):
    return np.multiply.outer(q_max, np.sin(np.pi * np.asarray(z)))


def ground_truth_fields(v_in, T_in, q_max, trunk):
    """Evaluate the analytic operator.

    Parameters
    ----------
    v_in, T_in, q_max : array_like, shape (n,)
    trunk : ndarray, shape (N, 2)
        Columns ``x`` and ``z`` in [0, 1].

    Returns
    -------
    ndarray, shape (n, N, 4)
    """
    v = np.asarray(v_in, float)[:, None]
    T = np.asarray(T_in, float)[:, None]
    qm = np.asarray(q_max, float)[:, None]
    x = trunk[None, :, 0]
    z = trunk[None, :, 1]
    Q = qm * (1.0 - np.cos(np.pi * z)) / np.pi
    P = 101325.0 - 40.0 * v**2 * z + 2e-3 * Q * x * (1.0 - x)
    u = 0.15 * v * np.sin(2 * np.pi * z) * (1.0 - 2.0 * x)
    vv = 0.05 * v * np.sin(np.pi * x) * np.cos(np.pi * z) * (1.0 + (T - 293.0) / 300.0)
    w = 4.0 * v * x * (1.0 - x) * (1.0 + 1e-5 * Q)
    return np.stack([P, u, vv, w], axis=-1)


def _minmax(x, lo, hi):
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def _inv_minmax(y, lo, hi):
    return (y + 1.0) * 0.5 * (hi - lo) + lo


def fit_normalizer(train: RawSplit, trunk: np.ndarray) -> Normalizer:
    b1_mean = train.branch1.mean(axis=0)
    b1_std = train.branch1.std(axis=0)
    b2_mean = float(train.branch2.mean())
    b2_std = float(train.branch2.std())
    tmin, tmax = trunk.min(axis=0), trunk.max(axis=0)
    fmin = train.fields.min(axis=(0, 1))
    fmax = train.fields.max(axis=(0, 1))
    scales = np.concatenate([b1_std, [b2_std], tmax - tmin, fmax - fmin])
    if np.any(scales <= 0) or not np.all(np.isfinite(scales)):
        raise DegenerateStatisticsError(
            "a normalization scale is zero; increase n_train so every input "
            "and output varies across the training split"
        )
    return Normalizer(b1_mean, b1_std, b2_mean, b2_std, tmin, tmax, fmin, fmax)


def standardize_inputs(branch1, branch2, norm: Normalizer) -> np.ndarray:
    b1 = (np.asarray(branch1, float) - norm.branch1_mean) / norm.branch1_std
    b2 = (np.asarray(branch2, float) - norm.branch2_mean) / norm.branch2_std
    return np.concatenate([b1, b2], axis=-1)


def destandardize_input(b, norm: Normalizer):
    """Map a standardized input back to physical units.

    Returns
    -------
    (branch1, q_profile)
        ``branch1`` holds ``(v_in, T_in)``.
    """
    b = np.asarray(b, float)
    b1 = b[..., :2] * norm.branch1_std + norm.branch1_mean
    q = b[..., 2:] * norm.branch2_std + norm.branch2_mean
    return b1, q


def normalize_trunk(trunk, norm: Normalizer) -> np.ndarray:
    return _minmax(np.asarray(trunk, float), norm.trunk_min, norm.trunk_max)


def normalize_fields(fields, norm: Normalizer) -> np.ndarray:
    return _minmax(np.asarray(fields, float), norm.field_min, norm.field_max)


def denormalize_fields(fields_norm, norm: Normalizer) -> np.ndarray:
    return _inv_minmax(np.asarray(fields_norm, float), norm.field_min, norm.field_max)


def standardize(sample: RawSample, norm: Normalizer):
    """Return ``(b, trunk_norm, targets_norm)`` for one sample."""
    b = standardize_inputs(np.array([sample.v_in, sample.T_in]), sample.q_profile, norm)
    return b, normalize_trunk(sample.trunk, norm), normalize_fields(sample.fields, norm)


def standardize_split(raw: RawSplit, trunk: np.ndarray, norm: Normalizer) -> StandardizedSplit:
    return StandardizedSplit(
        standardize_inputs(raw.branch1, raw.branch2, norm),
        normalize_trunk(trunk, norm),
        normalize_fields(raw.fields, norm),
    )


def target_exceedance(split: StandardizedSplit) -> dict:
    """Count normalized targets outside [-1, 1]; nothing is clipped."""
    t = split.targets_norm
    out = np.abs(t) > 1.0
    return {
        "count": int(out.sum()),
        "fraction": float(out.mean()) if t.size else 0.0,
        "max_abs": float(np.abs(t).max()) if t.size else 0.0,
    }


def _draw_split(rng, n, sensors, trunk) -> RawSplit:
    v = rng.uniform(*V_RANGE, size=n)
    T = rng.uniform(*T_RANGE, size=n)
    qm = rng.uniform(*QMAX_RANGE, size=n)
    return RawSplit(
        np.stack([v, T], axis=1),
        qm,
        heat_flux(qm, sensors),
        ground_truth_fields(v, T, qm, trunk),
    )


def _take(split: RawSplit, idx) -> RawSplit:
    return RawSplit(split.branch1[idx], split.q_max[idx], split.branch2[idx], split.fields[idx])


def generate_dataset(n_train: int, n_test: int, n_b2: int, N: int, seed: int) -> Dataset:
    """Draw a fresh dataset and fit the normalizer on its training split.

    Raises
    ------
    ValueError
        On out-of-range sizes or a degenerate fitted scale.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be at least 1")
    if n_b2 < 4:
        raise ValueError("n_b2 must be at least 4")
    if N < 16:
        raise ValueError("N must be at least 16")
    trunk = make_grid(N)
    sensors = sensor_locations(n_b2)
    rng = np.random.default_rng(seed)
    pool = _draw_split(rng, n_train + n_test, sensors, trunk)
    perm = rng.permutation(n_train + n_test)
    train = _take(pool, perm[:n_train])
    test = _take(pool, perm[n_train:])
    norm = fit_normalizer(train, trunk)
    ds = Dataset(train, test, norm, trunk, sensors, seed)
    ds.meta["test_target_exceedance"] = target_exceedance(ds.standardized("test"))
    return ds


def feasibility_check(b_adv, perturbed, norm: Normalizer | None = None) -> FeasibilityReport:
    """Check that perturbed standardized coordinates stay within one sigma.

    ``norm`` is accepted for interface symmetry; the check itself lives
    entirely in standardized space.
    """
    b_adv = np.asarray(b_adv, float)
    idx = np.asarray(sorted(set(int(i) for i in perturbed)), dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= b_adv.size):
        raise IndexError("perturbed index outside the input vector")
    vals = b_adv[idx]
    return FeasibilityReport(bool(np.all(np.abs(vals) <= 1.0)), float(np.sum(vals**2)))


_SPLIT_ARRAYS = ("branch1", "q_max", "branch2", "fields")


def save_dataset(ds: Dataset, directory) -> Path:
    """Write a manifest plus little-endian float64 row-major arrays."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {"trunk": ds.trunk, "sensors": ds.sensors}
    for split_name in ("train", "test"):
        split = getattr(ds, split_name)
        for name in _SPLIT_ARRAYS:
            arrays[f"{split_name}_{name}"] = getattr(split, name)
    shapes = {}
    for name, arr in arrays.items():
        np.ascontiguousarray(arr, dtype="<f8").tofile(out / f"{name}.f64")
        shapes[name] = list(arr.shape)
    manifest = {
        "format": "opstress-dataset/1",
        "seed": ds.seed,
        "n_train": len(ds.train),
        "n_test": len(ds.test),
        "n_b2": ds.n_b2,
        "N": ds.n_points,
        "channels": list(CHANNELS),
        "dtype": "<f8",
        "order": "C",
        "arrays": shapes,
        "normalizer": ds.normalizer.to_dict(),
        "meta": ds.meta,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_dataset(directory) -> Dataset:
    src = Path(directory)
    manifest = json.loads((src / "manifest.json").read_text())
    arrays = {
        name: np.fromfile(src / f"{name}.f64", dtype="<f8").reshape(shape)
        for name, shape in manifest["arrays"].items()
    }
    splits = {
        s: RawSplit(*(arrays[f"{s}_{n}"] for n in _SPLIT_ARRAYS)) for s in ("train", "test")
    }
    return Dataset(
        splits["train"],
        splits["test"],
        Normalizer.from_dict(manifest["normalizer"]),
        arrays["trunk"],
        arrays["sensors"],
        int(manifest["seed"]),
        manifest.get("meta", {}),
    )
