"""Four multi-input neural operators sharing one evaluation interface.

Every model maps a standardized input ``b`` of length ``d = 2 + n_b2`` and a
normalized trunk grid of shape ``(N, 2)`` to normalized fields ``(N, C)``.
``b[:2]`` feeds branch 1 (global scalars) and ``b[2:]`` feeds branch 2 (the
flux profile).

Models expose

* ``parameters()`` -- ordered ``(name, array)`` pairs, the arrays are live;
* ``forward(B, trunk, rng, dropout, record)`` -- batched evaluation, with an
  optional record for ``backward``;
* ``backward(record, upstream)`` -- parameter gradients aligned with
  ``parameters()`` and the input gradient ``dB``;
* ``batch_evaluator(trunk)`` -- a closure with trunk features precomputed,
  used by the attack loops.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numcore as nc

ARCHS = ("mimonet", "nomad", "sdeeponet", "poddeeponet")
CKPT_MAGIC = b"OPSCKPT\x00"


class ModelMismatchError(ValueError):
    """Weights, dimensions or trunk grid do not fit the model."""


@dataclass(frozen=True)
class ArchConfig:
    latent: int = 32
    hidden: int = 64
    branch_hidden_layers: int = 2
    trunk_hidden_layers: int = 2
    decoder_hidden: tuple[int, ...] = (64,)
    gru_layers: int = 2
    pod_energy: float = 0.995
    pod_max_rank: int = 16
    activation: str = "relu"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["decoder_hidden"] = tuple(d.get("decoder_hidden", (64,)))
        return cls(**d)


# ----------------------------------------------------------------- POD


@dataclass
class PodBasis:
    """Per-channel orthonormal modes ``modes[c]`` of shape ``(N, r)``."""

    modes: np.ndarray  # (C, N, r)
    singular_values: list[np.ndarray]
    retained_energy: np.ndarray  # (C,)
    energy: float
    grid: np.ndarray | None = None

    @property
    def rank(self) -> int:
        return self.modes.shape[2]


def _energy_rank(sv: np.ndarray, energy: float, shape: tuple[int, int]) -> tuple[int, int]:
    tol = max(shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    numerical = int(np.sum(sv > tol))
    if numerical == 0:
        return 0, 0
    cum = np.cumsum(sv**2) / np.sum(sv**2)
    r_energy = int(np.searchsorted(cum, energy - 1e-12) + 1)
    return min(r_energy, numerical), numerical


def build_pod_basis(snapshots, energy: float = 0.995, max_rank: int | None = 16) -> PodBasis:
    """SVD basis of training snapshots.

    Parameters
    ----------
    snapshots : ndarray, shape (N, M) or (C, N, M)
        Columns are training fields of one channel; no centring is applied.
    energy : float
        Cumulative squared-singular-value fraction to retain.
    max_rank : int or None
        Upper cap on the rank.

    Returns
    -------
    PodBasis
        One rank ``r`` shared by all channels: the largest per-channel
        requirement, then capped at ``max_rank`` and at the numerical rank
        of the best-conditioned channel.
    """
    S = np.asarray(snapshots, dtype=float)
    if S.ndim == 2:
        S = S[None]
    if S.shape[2] < 2:
        raise ValueError("need at least two snapshots")
    us, svs, ranks, numericals = [], [], [], []
    for Sc in S:
        U, sv, _ = np.linalg.svd(Sc, full_matrices=False)
        r, num = _energy_rank(sv, energy, Sc.shape)
        us.append(U)
        svs.append(sv)
        ranks.append(r)
        numericals.append(num)
    r = max(ranks)
    if max_rank is not None:
        r = min(r, max_rank)
    r = max(1, min(r, max(numericals)))
    modes = np.stack([U[:, :r] for U in us])
    retained = np.array([np.sum(sv[:r] ** 2) / np.sum(sv**2) if sv.any() else 1.0 for sv in svs])
    return PodBasis(modes, svs, retained, energy)


# ----------------------------------------------------------------- models


@dataclass
class ForwardRecord:
    tapes: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


def _mlp_params(prefix: str, layers: list[nc.DenseLayer]):
    out = []
    for i, layer in enumerate(layers):
        out.append((f"{prefix}.{i}.W", layer.weights))
        out.append((f"{prefix}.{i}.b", layer.bias))
    return out


def _mlp_grads(grads):
    out = []
    for dW, db in grads:
        out.extend([dW, db])
    return out


def _zero_mlp_grads(layers):
    return [np.zeros_like(a) for layer in layers for a in (layer.weights, layer.bias)]


def _sizes(n_in: int, hidden: int, n_hidden: int, n_out: int) -> list[int]:
    return [n_in] + [hidden] * n_hidden + [n_out]


class OperatorModel:
    """Shared branch machinery; subclasses implement the composition head."""

    arch = "base"

    def __init__(self, d: int, n_channels: int, config: ArchConfig, rng: np.random.Generator):
        if d < 3:
            raise ModelMismatchError("input dimension must be at least 3")
        self.d = d
        self.n_b2 = d - 2
        self.n_channels = n_channels
        self.config = config
        act = config.activation
        p = config.latent
        self.branch1 = nc.init_mlp(_sizes(2, config.hidden, config.branch_hidden_layers, p), rng, act)
        self.branch2 = self._init_branch2(rng)

    # -- branch 2 defaults to an MLP over the profile
    def _init_branch2(self, rng):
        c = self.config
        return nc.init_mlp(_sizes(self.n_b2, c.hidden, c.branch_hidden_layers, c.latent), rng, c.activation)

    def _branch2_params(self):
        return _mlp_params("branch2", self.branch2)

    def _branch2_forward(self, x2, rng, dropout, rec):
        tape = nc.MlpTape(self.branch2) if rec is not None else None
        out = nc.mlp_forward(self.branch2, x2, dropout, rng, tape)
        if rec is not None:
            rec.tapes["branch2"] = tape
        return out

    def _branch2_backward(self, rec, g):
        grads, dx = rec.tapes["branch2"].backward(g)
        return _mlp_grads(grads), dx

    def _head_params(self) -> list[tuple[str, np.ndarray]]:
        raise NotImplementedError

    # -- public interface
    def parameters(self) -> list[tuple[str, np.ndarray]]:
        return _mlp_params("branch1", self.branch1) + self._branch2_params() + self._head_params()

    def parameter_arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.parameters()]

    def n_parameters(self) -> int:
        return int(sum(a.size for _, a in self.parameters()))

    def _check_inputs(self, B, trunk):
        B = np.asarray(B, dtype=float)
        single = B.ndim == 1
        if single:
            B = B[None]
        if B.shape[1] != self.d:
            raise ModelMismatchError(f"{self.arch}: expected b of length {self.d}, got {B.shape[1]}")
        trunk = np.asarray(trunk, dtype=float)
        if trunk.ndim != 2 or trunk.shape[1] != 2:
            raise ModelMismatchError("trunk must have shape (N, 2)")
        return B, trunk, single

    def _branches(self, B, rng, dropout, rec):
        t1 = nc.MlpTape(self.branch1) if rec is not None else None
        b1 = nc.mlp_forward(self.branch1, B[:, :2], dropout, rng, t1)
        if rec is not None:
            rec.tapes["branch1"] = t1
        b2 = self._branch2_forward(B[:, 2:], rng, dropout, rec)
        return b1, b2

    def _branch_backward(self, rec, g1, g2):
        grads1, dx1 = rec.tapes["branch1"].backward(g1)
        grads2, dx2 = self._branch2_backward(rec, g2)
        dB = np.concatenate([dx1, dx2.reshape(dx2.shape[0], -1)], axis=1)
        return _mlp_grads(grads1) + grads2, dB

    def forward(self, B, trunk, rng=None, dropout: float = 0.0, record: bool = False):
        """Evaluate on a batch.

        Returns
        -------
        out : ndarray, shape (n, N, C)
        rec : ForwardRecord or None
        """
        B, trunk, _ = self._check_inputs(B, trunk)
        rec = ForwardRecord() if record else None
        b1, b2 = self._branches(B, rng, dropout, rec)
        out = self._head_forward(b1, b2, trunk, rng, dropout, rec)
        return out, rec

    def backward(self, rec: ForwardRecord, upstream):
        """Reverse pass of a recorded ``forward``.

        Returns
        -------
        grads : list of ndarray
            Aligned with :meth:`parameters`.
        dB : ndarray, shape (n, d)
        """
        up = np.asarray(upstream, dtype=float)
        g1, g2, head_grads = self._head_backward(rec, up)
        branch_grads, dB = self._branch_backward(rec, g1, g2)
        return branch_grads + head_grads, dB

    def evaluate(self, b, trunk) -> np.ndarray:
        """Deterministic prediction, ``(N, C)`` for a single ``b``."""
        B, trunk, single = self._check_inputs(b, trunk)
        out, _ = self.forward(B, trunk)
        return out[0] if single else out

    fast_chunk = 64

    def batch_evaluator(self, trunk, chunk: int | None = None) -> Callable[[np.ndarray], np.ndarray]:
        """Return ``f(B) -> (n, N, C)`` with trunk features cached.

        Rows are processed ``chunk`` at a time to keep intermediates in cache.
        """
        trunk = np.asarray(trunk, dtype=float)
        chunk = chunk or self.fast_chunk
        core = self._make_fast(trunk)

        def run(B):
            B = np.atleast_2d(np.asarray(B, dtype=float))
            if B.shape[1] != self.d:
                raise ModelMismatchError(f"{self.arch}: expected b of length {self.d}")
            if B.shape[0] <= chunk:
                return core(B)
            return np.concatenate([core(B[i : i + chunk]) for i in range(0, B.shape[0], chunk)])

        return run

    def _make_fast(self, trunk):
        return lambda B: self.forward(B, trunk)[0]

    def _fast_branch2(self, x2):
        return nc.mlp_forward(self.branch2, x2)

    def _fused_branches(self, B):
        return nc.mlp_forward(self.branch1, B[:, :2]) + self._fast_branch2(B[:, 2:])

    def describe(self) -> dict:
        return {"activation": self.config.activation, "latent": self.config.latent}


class MIMONet(OperatorModel):
    """Concatenate ``[b1; b2; t(y)]`` and decode point by point."""

    arch = "mimonet"
    fast_chunk = 16

    def __init__(self, d, n_channels, config, rng):
        super().__init__(d, n_channels, config, rng)
        c = config
        self.trunk = nc.init_mlp(_sizes(2, c.hidden, c.trunk_hidden_layers, c.latent), rng, c.activation)
        self.decoder = nc.init_mlp([3 * c.latent, *c.decoder_hidden, n_channels], rng, c.activation)

    def _head_params(self):
        return _mlp_params("trunk", self.trunk) + _mlp_params("decoder", self.decoder)

    def _head_forward(self, b1, b2, trunk, rng, dropout, rec):
        n, N, p = b1.shape[0], trunk.shape[0], self.config.latent
        tt = nc.MlpTape(self.trunk) if rec is not None else None
        t = nc.mlp_forward(self.trunk, trunk, dropout, rng, tt)
        h = np.empty((n, N, 3 * p))
        h[:, :, :p] = b1[:, None, :]
        h[:, :, p : 2 * p] = b2[:, None, :]
        h[:, :, 2 * p :] = t[None]
        td = nc.MlpTape(self.decoder) if rec is not None else None
        out = nc.mlp_forward(self.decoder, h, dropout, rng, td)
        if rec is not None:
            rec.tapes.update(trunk=tt, decoder=td)
        return out

    def _head_backward(self, rec, up):
        p = self.config.latent
        dec_grads, dh = rec.tapes["decoder"].backward(up)
        g1 = dh[:, :, :p].sum(axis=1)
        g2 = dh[:, :, p : 2 * p].sum(axis=1)
        trunk_grads, _ = rec.tapes["trunk"].backward(dh[:, :, 2 * p :].sum(axis=0))
        return g1, g2, _mlp_grads(trunk_grads) + _mlp_grads(dec_grads)

    def _make_fast(self, trunk):
        p = self.config.latent
        first, rest = self.decoder[0], self.decoder[1:]
        W = first.weights
        t = nc.mlp_forward(self.trunk, trunk)
        t_part = t @ W[:, 2 * p :].T + first.bias  # (N, h)
        Wb1, Wb2 = W[:, :p].T, W[:, p : 2 * p].T

        def core(B):
            b1 = nc.mlp_forward(self.branch1, B[:, :2])
            b2 = self._fast_branch2(B[:, 2:])
            z = np.add((b1 @ Wb1 + b2 @ Wb2)[:, None, :], t_part[None])
            h = nc.activate_inplace(first.activation, z)
            return nc.mlp_forward(rest, h) if rest else h

        return core


def _reshape_channel_major(t, n_channels, p):
    return t.reshape(t.shape[0], n_channels, p)


class NOMAD(OperatorModel):
    """Decode ``Flatten((b1 + b2) * t(y))`` with the trunk read as (C, p)."""

    arch = "nomad"
    fast_chunk = 32

    def __init__(self, d, n_channels, config, rng):
        super().__init__(d, n_channels, config, rng)
        c = config
        cp = n_channels * c.latent
        self.trunk = nc.init_mlp(_sizes(2, c.hidden, c.trunk_hidden_layers, cp), rng, c.activation)
        self.decoder = nc.init_mlp([cp, *c.decoder_hidden, n_channels], rng, c.activation)

    def _head_params(self):
        return _mlp_params("trunk", self.trunk) + _mlp_params("decoder", self.decoder)

    def _head_forward(self, b1, b2, trunk, rng, dropout, rec):
        C, p = self.n_channels, self.config.latent
        tt = nc.MlpTape(self.trunk) if rec is not None else None
        t = _reshape_channel_major(nc.mlp_forward(self.trunk, trunk, dropout, rng, tt), C, p)
        fused = b1 + b2
        z = (fused[:, None, None, :] * t[None]).reshape(fused.shape[0], trunk.shape[0], C * p)
        td = nc.MlpTape(self.decoder) if rec is not None else None
        out = nc.mlp_forward(self.decoder, z, dropout, rng, td)
        if rec is not None:
            rec.tapes.update(trunk=tt, decoder=td)
            rec.extras.update(fused=fused, t=t)
        return out

    def _head_backward(self, rec, up):
        C, p = self.n_channels, self.config.latent
        fused, t = rec.extras["fused"], rec.extras["t"]
        dec_grads, dz = rec.tapes["decoder"].backward(up)
        dz = dz.reshape(dz.shape[0], dz.shape[1], C, p)
        dfused = np.einsum("nNci,Nci->ni", dz, t)
        dt = np.einsum("nNci,ni->Nci", dz, fused).reshape(t.shape[0], C * p)
        trunk_grads, _ = rec.tapes["trunk"].backward(dt)
        return dfused, dfused, _mlp_grads(trunk_grads) + _mlp_grads(dec_grads)

    def _make_fast(self, trunk):
        C, p = self.n_channels, self.config.latent
        first, rest = self.decoder[0], self.decoder[1:]
        t = _reshape_channel_major(nc.mlp_forward(self.trunk, trunk), C, p)  # (N, C, p)
        W1 = first.weights.reshape(-1, C, p)  # (h, C, p)
        # h1[n, N, h] = sum_{c,i} fused[n, i] t[N, c, i] W1[h, c, i]
        K = np.einsum("Nci,hci->iNh", t, W1)
        N, h = K.shape[1], K.shape[2]
        K = K.reshape(p, N * h)

        def core(B):
            fused = self._fused_branches(B)
            z = (fused @ K).reshape(B.shape[0], N, h)
            z += first.bias
            a = nc.activate_inplace(first.activation, z)
            return nc.mlp_forward(rest, a) if rest else a

        return core


class SDeepONet(OperatorModel):
    """GRU-encoded flux profile; inner product of fused branch with trunk."""

    arch = "sdeeponet"
    fast_chunk = 512

    def __init__(self, d, n_channels, config, rng):
        super().__init__(d, n_channels, config, rng)
        c = config
        self.trunk = nc.init_mlp(
            _sizes(2, c.hidden, c.trunk_hidden_layers, n_channels * c.latent), rng, c.activation
        )
        self.bias = np.zeros(n_channels)

    def _init_branch2(self, rng):
        return nc.init_gru(1, self.config.latent, self.config.gru_layers, rng)

    def _branch2_params(self):
        out = []
        for li, cell in enumerate(self.branch2.cells):
            out.extend((f"branch2.gru.{li}.{name}", arr) for name, arr in cell.named_arrays())
        return out

    def _branch2_forward(self, x2, rng, dropout, rec):
        tape = nc.GruTape(self.branch2) if rec is not None else None
        out = nc.gru_forward(self.branch2, x2[:, :, None], tape)
        if rec is not None:
            rec.tapes["branch2"] = tape
        return out

    def _branch2_backward(self, rec, g):
        grads, dseq = rec.tapes["branch2"].backward(g)
        flat = []
        for li, cell in enumerate(self.branch2.cells):
            flat.extend(grads[li][name] for name, _ in cell.named_arrays())
        return flat, dseq[:, :, 0]

    def _fast_branch2(self, x2):
        return nc.gru_forward(self.branch2, x2[:, :, None])

    def _head_params(self):
        return _mlp_params("trunk", self.trunk) + [("bias", self.bias)]

    def _head_forward(self, b1, b2, trunk, rng, dropout, rec):
        C, p = self.n_channels, self.config.latent
        tt = nc.MlpTape(self.trunk) if rec is not None else None
        t = _reshape_channel_major(nc.mlp_forward(self.trunk, trunk, dropout, rng, tt), C, p)
        fused = b1 + b2
        out = np.einsum("ni,Nci->nNc", fused, t) + self.bias
        if rec is not None:
            rec.tapes["trunk"] = tt
            rec.extras.update(fused=fused, t=t)
        return out

    def _head_backward(self, rec, up):
        C, p = self.n_channels, self.config.latent
        fused, t = rec.extras["fused"], rec.extras["t"]
        dfused = np.einsum("nNc,Nci->ni", up, t)
        dt = np.einsum("nNc,ni->Nci", up, fused).reshape(t.shape[0], C * p)
        trunk_grads, _ = rec.tapes["trunk"].backward(dt)
        dbias = up.sum(axis=(0, 1))
        return dfused, dfused, _mlp_grads(trunk_grads) + [dbias]

    def _make_fast(self, trunk):
        C, p = self.n_channels, self.config.latent
        t = nc.mlp_forward(self.trunk, trunk).reshape(-1, p)  # (N*C, p)
        Tm = np.ascontiguousarray(t.T)
        N = trunk.shape[0]

        def core(B):
            fused = self._fused_branches(B)
            return (fused @ Tm).reshape(B.shape[0], N, C) + self.bias

        return core


class PODDeepONet(OperatorModel):
    """Coefficient head on the fused branch, expanded in a fixed POD basis."""

    arch = "poddeeponet"
    fast_chunk = 512

    def __init__(self, d, n_channels, config, rng, pod: PodBasis | None = None):
        super().__init__(d, n_channels, config, rng)
        if pod is None:
            raise ModelMismatchError("POD-DeepONet needs a POD basis")
        if pod.modes.shape[0] != n_channels:
            raise ModelMismatchError("POD basis channel count differs from model")
        self.pod = pod
        c = config
        self.coeff = nc.init_mlp([c.latent, *c.decoder_hidden, n_channels * pod.rank], rng, c.activation)

    def _head_params(self):
        return _mlp_params("coeff", self.coeff)

    def _check_grid(self, trunk):
        if self.pod.modes.shape[1] != trunk.shape[0] or (
            self.pod.grid is not None and not np.array_equal(self.pod.grid, trunk)
        ):
            raise ModelMismatchError("POD basis is only defined on its training grid")

    def coefficients(self, B) -> np.ndarray:
        """Predicted POD coefficients, shape ``(n, C, r)``."""
        B = np.atleast_2d(np.asarray(B, dtype=float))
        alpha = nc.mlp_forward(self.coeff, self._fused_branches(B))
        return alpha.reshape(B.shape[0], self.n_channels, self.pod.rank)

    def coefficient_jacobian(self, b) -> np.ndarray:
        """Jacobian of the flattened ``(C*r,)`` coefficients w.r.t. ``b``."""
        b = np.asarray(b, dtype=float)
        m = self.n_channels * self.pod.rank
        B = np.repeat(b[None], m, axis=0)
        rec = ForwardRecord()
        b1, b2 = self._branches(B, None, 0.0, rec)
        tc = nc.MlpTape(self.coeff)
        nc.mlp_forward(self.coeff, b1 + b2, tape=tc)
        _, dfused = tc.backward(np.eye(m))
        _, dB = self._branch_backward(rec, dfused, dfused)
        return dB

    def expand(self, alpha) -> np.ndarray:
        """Map coefficients ``(n, C, r)`` to fields ``(n, N, C)``."""
        return np.einsum("cNr,ncr->nNc", self.pod.modes, alpha)

    def _head_forward(self, b1, b2, trunk, rng, dropout, rec):
        self._check_grid(trunk)
        tc = nc.MlpTape(self.coeff) if rec is not None else None
        alpha = nc.mlp_forward(self.coeff, b1 + b2, dropout, rng, tc)
        alpha = alpha.reshape(alpha.shape[0], self.n_channels, self.pod.rank)
        if rec is not None:
            rec.tapes["coeff"] = tc
        return self.expand(alpha)

    def _head_backward(self, rec, up):
        dalpha = np.einsum("nNc,cNr->ncr", up, self.pod.modes)
        grads, dfused = rec.tapes["coeff"].backward(dalpha.reshape(dalpha.shape[0], -1))
        return dfused, dfused, _mlp_grads(grads)

    def _make_fast(self, trunk):
        self._check_grid(trunk)
        return lambda B: self.expand(self.coefficients(B))

    def describe(self) -> dict:
        out = super().describe()
        out["pod"] = {
            "rank": self.pod.rank,
            "energy": self.pod.energy,
            "retained_energy": self.pod.retained_energy.tolist(),
        }
        return out


class AffineModel:
    """``f(b) = A b + c`` reshaped to ``(N, C)``; a white-box reference model."""

    arch = "affine"

    def __init__(self, A, c=None, n_channels: int = 1):
        self.A = np.asarray(A, dtype=float)
        self.c = np.zeros(self.A.shape[0]) if c is None else np.asarray(c, dtype=float)
        self.n_channels = n_channels
        self.d = self.A.shape[1]
        if self.A.shape[0] % n_channels:
            raise ModelMismatchError("rows of A must be a multiple of the channel count")
        self.n_points = self.A.shape[0] // n_channels

    def parameters(self):
        return []

    def forward(self, B, trunk=None, rng=None, dropout=0.0, record=False):
        B = np.atleast_2d(np.asarray(B, dtype=float))
        out = (B @ self.A.T + self.c).reshape(B.shape[0], self.n_points, self.n_channels)
        return out, (ForwardRecord() if record else None)

    def backward(self, rec, upstream):
        up = np.asarray(upstream, dtype=float).reshape(-1, self.A.shape[0])
        return [], up @ self.A

    def evaluate(self, b, trunk=None):
        b = np.asarray(b, dtype=float)
        out, _ = self.forward(b)
        return out[0] if b.ndim == 1 else out

    def batch_evaluator(self, trunk=None, chunk: int = 64):
        return lambda B: self.forward(B)[0]


_CLASSES = {cls.arch: cls for cls in (MIMONet, NOMAD, SDeepONet, PODDeepONet)}


def build_model(arch: str, d: int, n_channels: int, rng, config: ArchConfig | None = None, pod=None):
    if arch not in _CLASSES:
        raise ModelMismatchError(f"unknown architecture {arch!r}; choose from {ARCHS}")
    config = config or ArchConfig()
    if arch == "poddeeponet":
        return PODDeepONet(d, n_channels, config, rng, pod)
    return _CLASSES[arch](d, n_channels, config, rng)


# ----------------------------------------------------------------- gradients


def model_gradient(model, b, trunk, seed_direction) -> np.ndarray:
    """Return ``J^T seed_direction`` for a single input ``b`` (reverse mode)."""
    b = np.asarray(b, dtype=float)
    out, rec = model.forward(b[None], trunk, record=True)
    seed = np.asarray(seed_direction, dtype=float).reshape(out.shape)
    _, dB = model.backward(rec, seed)
    return dB[0]


def vjp_batch(model, b, trunk, directions, chunk: int = 64) -> np.ndarray:
    """``J^T u`` for each row ``u`` of ``directions``; returns ``(m, d)``."""
    b = np.asarray(b, dtype=float)
    U = np.atleast_2d(np.asarray(directions, dtype=float))
    rows = []
    for i in range(0, U.shape[0], chunk):
        block = U[i : i + chunk]
        out, rec = model.forward(np.repeat(b[None], block.shape[0], axis=0), trunk, record=True)
        _, dB = model.backward(rec, block.reshape(out.shape))
        rows.append(dB)
    return np.concatenate(rows)


# ----------------------------------------------------------------- checkpoints


def _component_activations(model) -> dict:
    out = {}
    for name in ("branch1", "branch2", "trunk", "decoder", "coeff"):
        comp = getattr(model, name, None)
        if isinstance(comp, list):
            out[name] = [layer.activation for layer in comp]
        elif isinstance(comp, nc.GruStack):
            out[name] = "gru(sigmoid gates, tanh candidate)"
    return out


def save_checkpoint(model: OperatorModel, path, normalizer: dict | None = None, extra: dict | None = None):
    """Write header JSON plus a little-endian float64 blob.

    Layout: 8-byte magic, uint64 LE header length, UTF-8 JSON header, then
    the tensors back to back in header order.
    """
    tensors = list(model.parameters())
    if isinstance(model, PODDeepONet):
        tensors.append(("pod.modes", model.pod.modes))
        if model.pod.grid is not None:
            tensors.append(("pod.grid", model.pod.grid))
    manifest, offset = [], 0
    for name, arr in tensors:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "format": "opstress-checkpoint/1",
        "arch": model.arch,
        "d": model.d,
        "n_channels": model.n_channels,
        "config": model.config.to_dict(),
        "activations": _component_activations(model),
        "trunk_reshape": "channel-major (C, p)",
        "normalizer": normalizer,
        "tensors": manifest,
        "extra": extra or {},
    }
    if isinstance(model, PODDeepONet):
        header["pod"] = {
            "rank": model.pod.rank,
            "energy": model.pod.energy,
            "retained_energy": model.pod.retained_energy.tolist(),
        }
    hbytes = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CKPT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + blob)
    return path


def load_checkpoint(path):
    """Return ``(model, header)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ModelMismatchError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode())
    data = np.frombuffer(raw[16 + hlen :], dtype="<f8")
    arrays = {
        t["name"]: data[t["offset"] : t["offset"] + int(np.prod(t["shape"]))].reshape(t["shape"]).copy()
        for t in header["tensors"]
    }
    config = ArchConfig.from_dict(header["config"])
    pod = None
    if header["arch"] == "poddeeponet":
        p = header["pod"]
        pod = PodBasis(arrays["pod.modes"], [], np.asarray(p["retained_energy"]), p["energy"], arrays.get("pod.grid"))
    model = build_model(header["arch"], header["d"], header["n_channels"], np.random.default_rng(0), config, pod)
    params = model.parameters()
    for name, arr in params:
        if name not in arrays or arrays[name].shape != arr.shape:
            raise ModelMismatchError(f"checkpoint tensor {name} missing or mis-shaped")
        arr[...] = arrays[name]
    return model, header
