"""Dense-network kernel: MLP and GRU passes with hand-written reverse mode.

Every surrogate in :mod:`opstress.operators` is composed from the pieces in
this module. Arrays are float64 throughout. Forward passes accept an optional
tape; when one is supplied the intermediates needed for exact gradients are
recorded on it and :func:`backward` replays them once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")


class ShapeError(ValueError):
    """An input or weight does not have the size a layer expects."""


class TapeConsumedError(RuntimeError):
    """A gradient tape was replayed a second time."""


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return expit(z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def activate_inplace(name: str, z: np.ndarray) -> np.ndarray:
    """Like :func:`_activate` but overwrites ``z`` (inference paths only)."""
    if name == "relu":
        return np.maximum(z, 0.0, out=z)
    if name == "tanh":
        return np.tanh(z, out=z)
    if name == "sigmoid":
        return expit(z, out=z)
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray | float:
    # derivative w.r.t. the pre-activation, expressed through cached values
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    return 1.0


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError("weights must be a matrix")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]


def glorot_layer(n_in: int, n_out: int, rng: np.random.Generator, activation: str) -> DenseLayer:
    limit = np.sqrt(6.0 / (n_in + n_out))
    weights = rng.uniform(-limit, limit, size=(n_out, n_in))
    return DenseLayer(weights, np.zeros(n_out), activation)


def init_mlp(
    sizes: Sequence[int], rng: np.random.Generator, hidden_activation: str = "relu"
) -> list[DenseLayer]:
    """Glorot-initialised MLP. ``sizes`` lists input, hidden and output widths.

    Hidden layers get ``hidden_activation``; the output layer is linear.
    """
    if len(sizes) < 2:
        raise ValueError("an MLP needs at least an input and an output size")
    layers = []
    for i in range(len(sizes) - 1):
        last = i == len(sizes) - 2
        layers.append(glorot_layer(sizes[i], sizes[i + 1], rng, "identity" if last else hidden_activation))
    return layers


class MlpTape:
    """Forward intermediates of one :func:`mlp_forward` call."""

    def __init__(self, layers: Sequence[DenseLayer]):
        self.layers = list(layers)
        self.records: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray | None]] = []
        self.lead_shape: tuple[int, ...] = ()
        self.consumed = False

    def backward(self, upstream: np.ndarray):
        """Return ``([(dW, db), ...], dx)`` for upstream gradient ``upstream``."""
        if self.consumed:
            raise TapeConsumedError("MLP tape already replayed")
        self.consumed = True
        g = np.asarray(upstream, dtype=np.float64).reshape(-1, self.layers[-1].out_size)
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)  # type: ignore[list-item]
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            h_in, z, a, mask = self.records[idx]
            if mask is not None:
                g = g * mask
            g = g * _activation_grad(layer.activation, z, a)
            grads[idx] = (g.T @ h_in, g.sum(axis=0))
            g = g @ layer.weights
        return grads, g.reshape(self.lead_shape + (self.layers[0].in_size,))


def mlp_forward(
    layers: Sequence[DenseLayer],
    x: np.ndarray,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    tape: MlpTape | None = None,
) -> np.ndarray:
    """Evaluate a stack of dense layers on ``x`` of shape ``(..., in)``.

    Each layer applies its own activation. Inverted dropout is applied after
    every hidden layer when ``dropout_rate > 0`` and an ``rng`` is given
    (training mode); the final layer never gets dropout.
    """
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    h = x.reshape(-1, x.shape[-1]) if x.ndim else x.reshape(1, 1)
    if tape is not None:
        tape.lead_shape = lead
    train = dropout_rate > 0.0 and rng is not None
    n_layers = len(layers)
    for idx, layer in enumerate(layers):
        if h.shape[1] != layer.in_size:
            raise ShapeError(f"layer {idx}: expected input size {layer.in_size}, got {h.shape[1]}")
        z = h @ layer.weights.T + layer.bias
        a = _activate(layer.activation, z)
        mask = None
        out = a
        if train and idx < n_layers - 1:
            mask = (rng.random(a.shape) >= dropout_rate) / (1.0 - dropout_rate)
            out = a * mask
        if tape is not None:
            tape.records.append((h, z, a, mask))
        h = out
    return h.reshape(lead + (h.shape[1],))


# --------------------------------------------------------------------- GRU

_GATES = ("r", "z", "h")


@dataclass
class GruCell:
    """One GRU layer: input weights W_*, recurrent weights U_*, biases b_*."""

    W_r: np.ndarray
    W_z: np.ndarray
    W_h: np.ndarray
    U_r: np.ndarray
    U_z: np.ndarray
    U_h: np.ndarray
    b_r: np.ndarray
    b_z: np.ndarray
    b_h: np.ndarray

    def __post_init__(self) -> None:
        hidden = self.U_r.shape[0]
        for g in _GATES:
            W, U, b = self.W(g), self.U(g), self.b(g)
            if U.shape != (hidden, hidden) or W.shape[0] != hidden or b.shape != (hidden,):
                raise ShapeError(f"gate {g}: inconsistent hidden dimension")
            if W.shape[1] != self.W_r.shape[1]:
                raise ShapeError(f"gate {g}: inconsistent input dimension")

    def W(self, gate: str) -> np.ndarray:
        return getattr(self, f"W_{gate}")

    def U(self, gate: str) -> np.ndarray:
        return getattr(self, f"U_{gate}")

    def b(self, gate: str) -> np.ndarray:
        return getattr(self, f"b_{gate}")

    @property
    def hidden_size(self) -> int:
        return self.U_r.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_r.shape[1]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        names = [f"W_{g}" for g in _GATES] + [f"U_{g}" for g in _GATES] + [f"b_{g}" for g in _GATES]
        return [(n, getattr(self, n)) for n in names]


@dataclass
class GruStack:
    cells: list[GruCell] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.cells:
            raise ShapeError("a GRU stack needs at least one layer")
        for i in range(1, len(self.cells)):
            if self.cells[i].input_size != self.cells[i - 1].hidden_size:
                raise ShapeError(f"GRU layer {i}: input size does not match previous hidden size")

    @property
    def hidden_size(self) -> int:
        return self.cells[-1].hidden_size


def init_gru(input_size: int, hidden_size: int, num_layers: int, rng: np.random.Generator) -> GruStack:
    bound = 1.0 / np.sqrt(hidden_size)
    cells = []
    for layer in range(num_layers):
        n_in = input_size if layer == 0 else hidden_size
        arrays = {}
        for g in _GATES:
            arrays[f"W_{g}"] = rng.uniform(-bound, bound, size=(hidden_size, n_in))
        for g in _GATES:
            arrays[f"U_{g}"] = rng.uniform(-bound, bound, size=(hidden_size, hidden_size))
        for g in _GATES:
            arrays[f"b_{g}"] = rng.uniform(-bound, bound, size=hidden_size)
        cells.append(GruCell(**arrays))
    return GruStack(cells)


class GruTape:
    """Per-step caches of a :func:`gru_forward` call, for backprop through time."""

    def __init__(self, stack: GruStack):
        self.stack = stack
        # caches[layer][t] = (x, h_prev, r, z, cand)
        self.caches: list[list[tuple[np.ndarray, ...]]] = [[] for _ in stack.cells]
        self.single = False
        self.consumed = False

    def backward(self, upstream: np.ndarray):
        """Return ``(grads, dseq)``.

        ``grads`` holds one dict per layer keyed like :meth:`GruCell.named_arrays`;
        ``dseq`` matches the forward sequence shape.
        """
        if self.consumed:
            raise TapeConsumedError("GRU tape already replayed")
        self.consumed = True
        dh_top = np.asarray(upstream, dtype=np.float64)
        if self.single:
            dh_top = dh_top[None, :]
        n_steps = len(self.caches[0])
        grads = []
        # gradients arriving at each step's output of the current layer
        d_out = [None] * n_steps
        d_out[-1] = dh_top
        for li in range(len(self.stack.cells) - 1, -1, -1):
            cell = self.stack.cells[li]
            g = {name: np.zeros_like(arr) for name, arr in cell.named_arrays()}
            dh_next = np.zeros((dh_top.shape[0], cell.hidden_size))
            d_in = [None] * n_steps
            for t in range(n_steps - 1, -1, -1):
                x, h_prev, r, z, cand = self.caches[li][t]
                dh = dh_next if d_out[t] is None else dh_next + d_out[t]
                dz = dh * (cand - h_prev)
                dcand = dh * z
                dh_prev = dh * (1.0 - z)
                da_h = dcand * (1.0 - cand * cand)
                rh = r * h_prev
                g["W_h"] += da_h.T @ x
                g["U_h"] += da_h.T @ rh
                g["b_h"] += da_h.sum(axis=0)
                drh = da_h @ cell.U_h
                dr = drh * h_prev
                dh_prev += drh * r
                dx = da_h @ cell.W_h
                da_z = dz * z * (1.0 - z)
                g["W_z"] += da_z.T @ x
                g["U_z"] += da_z.T @ h_prev
                g["b_z"] += da_z.sum(axis=0)
                dx += da_z @ cell.W_z
                dh_prev += da_z @ cell.U_z
                da_r = dr * r * (1.0 - r)
                g["W_r"] += da_r.T @ x
                g["U_r"] += da_r.T @ h_prev
                g["b_r"] += da_r.sum(axis=0)
                dx += da_r @ cell.W_r
                dh_prev += da_r @ cell.U_r
                d_in[t] = dx
                dh_next = dh_prev
            grads.append(g)
            d_out = d_in
        grads.reverse()
        dseq = np.stack(d_out, axis=1)
        if self.single:
            dseq = dseq[0]
        return grads, dseq


def gru_cell_step(cell: GruCell, x: np.ndarray, h_prev: np.ndarray):
    """One application of the GRU update; returns ``(h, (r, z, cand))``."""
    r = expit(x @ cell.W_r.T + h_prev @ cell.U_r.T + cell.b_r)
    z = expit(x @ cell.W_z.T + h_prev @ cell.U_z.T + cell.b_z)
    cand = np.tanh(x @ cell.W_h.T + (r * h_prev) @ cell.U_h.T + cell.b_h)
    h = (1.0 - z) * h_prev + z * cand
    return h, (r, z, cand)


def gru_forward(stack: GruStack, sequence: np.ndarray, tape: GruTape | None = None) -> np.ndarray:
    """Run the stack over ``sequence`` and return the last layer's final state.

    ``sequence`` is ``(T, in)`` or batched ``(batch, T, in)``; the initial
    hidden state of every layer is zero.
    """
    seq = np.asarray(sequence, dtype=np.float64)
    single = seq.ndim == 2
    if single:
        seq = seq[None]
    if seq.ndim != 3:
        raise ShapeError("sequence must be (T, in) or (batch, T, in)")
    if seq.shape[1] == 0:
        raise ShapeError("empty sequence")
    if seq.shape[2] != stack.cells[0].input_size:
        raise ShapeError(
            f"GRU layer 0: expected input size {stack.cells[0].input_size}, got {seq.shape[2]}"
        )
    if tape is not None:
        tape.single = single
    inputs = [seq[:, t, :] for t in range(seq.shape[1])]
    h = None
    for li, cell in enumerate(stack.cells):
        h = np.zeros((seq.shape[0], cell.hidden_size))
        outputs = []
        for x in inputs:
            h_prev = h
            h, (r, z, cand) = gru_cell_step(cell, x, h_prev)
            if tape is not None:
                tape.caches[li].append((x, h_prev, r, z, cand))
            outputs.append(h)
        inputs = outputs
    return h[0] if single else h


def backward(tape: MlpTape | GruTape, upstream: np.ndarray):
    """Replay ``tape`` with ``upstream``; returns ``(param_grads, input_grads)``."""
    return tape.backward(upstream)


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[Sequence[np.ndarray], AdamState]:
    """In-place Adam update with L2 decay added to the gradient."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("params, grads and optimizer state have different lengths")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"parameter of shape {p.shape} got gradient {g.shape}")
        if weight_decay:
            g = g + weight_decay * p
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state
