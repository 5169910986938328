import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opstress import numcore as nc

from oracles import central_fd, naive_gru, naive_mlp


def test_identity_layer_passes_input_through():
    layer = nc.DenseLayer(np.eye(2), np.zeros(2), "identity")
    np.testing.assert_array_equal(nc.mlp_forward([layer], np.array([1.0, 2.0])), [1.0, 2.0])


def test_relu_layer_clamps():
    layer = nc.DenseLayer(np.array([[1.0]]), np.array([-2.0]), "relu")
    assert nc.mlp_forward([layer], np.array([1.0]))[0] == 0.0


def test_two_layer_net_matches_naive_evaluator():
    rng = np.random.default_rng(3)
    layers = nc.init_mlp([5, 7, 3], rng)
    for layer in layers:
        layer.bias[:] = rng.normal(size=layer.bias.shape)
    x = rng.normal(size=5)
    expected = naive_mlp(
        [l.weights.tolist() for l in layers],
        [l.bias.tolist() for l in layers],
        [l.activation for l in layers],
        x,
    )
    np.testing.assert_allclose(nc.mlp_forward(layers, x), expected, atol=1e-6)


def test_dimension_mismatch_names_layer():
    layers = nc.init_mlp([3, 4, 2], np.random.default_rng(0))
    layers[1] = nc.DenseLayer(np.zeros((2, 5)), np.zeros(2))
    with pytest.raises(nc.ShapeError, match="layer 1"):
        nc.mlp_forward(layers, np.zeros(3))


def test_final_layer_is_linear_and_dropout_is_train_only():
    rng = np.random.default_rng(1)
    layers = nc.init_mlp([4, 16, 16, 3], rng)
    assert layers[-1].activation == "identity"
    assert all(l.activation == "relu" for l in layers[:-1])
    x = rng.normal(size=(6, 4))
    a = nc.mlp_forward(layers, x, dropout_rate=0.1)
    b = nc.mlp_forward(layers, x)
    np.testing.assert_array_equal(a, b)
    c = nc.mlp_forward(layers, x, 0.1, np.random.default_rng(9))
    d = nc.mlp_forward(layers, x, 0.1, np.random.default_rng(9))
    np.testing.assert_array_equal(c, d)
    assert not np.allclose(c, b)


def _cell_dict(cell):
    return dict(cell.named_arrays())


def test_zero_weight_gru_stays_at_zero():
    stack = nc.init_gru(1, 4, 2, np.random.default_rng(0))
    for cell in stack.cells:
        for _, arr in cell.named_arrays():
            arr[...] = 0.0
    h = nc.gru_forward(stack, np.ones((6, 1)))
    np.testing.assert_array_equal(h, np.zeros(4))


def test_gru_length_one_is_single_cell_step():
    stack = nc.init_gru(2, 3, 1, np.random.default_rng(4))
    x = np.array([[0.3, -0.7]])
    h, _ = nc.gru_cell_step(stack.cells[0], x, np.zeros((1, 3)))
    np.testing.assert_allclose(nc.gru_forward(stack, x), h[0], rtol=0, atol=1e-15)


def test_gru_matches_per_equation_oracle():
    rng = np.random.default_rng(5)
    stack = nc.init_gru(1, 5, 2, rng)
    xs = rng.normal(size=(3, 1))
    expected = naive_gru([_cell_dict(c) for c in stack.cells], xs)
    np.testing.assert_allclose(nc.gru_forward(stack, xs), expected, atol=1e-12)


def test_gru_batched_equals_single():
    rng = np.random.default_rng(6)
    stack = nc.init_gru(1, 4, 2, rng)
    seqs = rng.normal(size=(3, 7, 1))
    batched = nc.gru_forward(stack, seqs)
    for i in range(3):
        np.testing.assert_allclose(batched[i], nc.gru_forward(stack, seqs[i]), atol=1e-14)


def test_gru_final_state_depends_on_order():
    stack = nc.init_gru(1, 4, 1, np.random.default_rng(7))
    a = nc.gru_forward(stack, np.array([[1.0], [-1.0]]))
    b = nc.gru_forward(stack, np.array([[-1.0], [1.0]]))
    assert not np.allclose(a, b)


def test_empty_sequence_rejected():
    stack = nc.init_gru(1, 2, 1, np.random.default_rng(0))
    with pytest.raises(nc.ShapeError):
        nc.gru_forward(stack, np.zeros((0, 1)))


def test_linear_map_input_grad_is_row():
    W = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    layer = nc.DenseLayer(W, np.zeros(2))
    tape = nc.MlpTape([layer])
    nc.mlp_forward([layer], np.array([0.1, 0.2, 0.3]), tape=tape)
    _, dx = nc.backward(tape, np.array([0.0, 1.0]))
    np.testing.assert_array_equal(dx, W[1])


def test_tape_cannot_be_replayed():
    layers = nc.init_mlp([2, 3, 1], np.random.default_rng(0))
    tape = nc.MlpTape(layers)
    nc.mlp_forward(layers, np.ones(2), tape=tape)
    nc.backward(tape, np.ones(1))
    with pytest.raises(nc.TapeConsumedError):
        nc.backward(tape, np.ones(1))


def _mlp_scalar(layers, x, w, mask_rng_seed=None):
    rng = None if mask_rng_seed is None else np.random.default_rng(mask_rng_seed)
    return float(w @ nc.mlp_forward(layers, x, 0.1 if rng else 0.0, rng))


@pytest.mark.parametrize("seed", range(5))
def test_mlp_param_and_input_grads_match_fd(seed):
    rng = np.random.default_rng(seed)
    layers = nc.init_mlp([3, 6, 6, 2], rng, "tanh")
    x = rng.normal(size=3)
    w = rng.normal(size=2)
    tape = nc.MlpTape(layers)
    nc.mlp_forward(layers, x, 0.1, np.random.default_rng(100 + seed), tape)
    grads, dx = nc.backward(tape, w)
    fd_x = central_fd(lambda v: _mlp_scalar(layers, v, w, 100 + seed), x.copy())
    np.testing.assert_allclose(dx, fd_x, rtol=1e-6, atol=1e-9)
    fd_w = central_fd(lambda _: _mlp_scalar(layers, x, w, 100 + seed), layers[0].weights)
    np.testing.assert_allclose(grads[0][0], fd_w, rtol=1e-6, atol=1e-9)


def test_gru_bptt_matches_fd_length_five():
    rng = np.random.default_rng(11)
    stack = nc.init_gru(1, 4, 2, rng)
    seq = rng.normal(size=(5, 1))
    w = rng.normal(size=4)
    tape = nc.GruTape(stack)
    nc.gru_forward(stack, seq, tape)
    grads, dseq = nc.backward(tape, w)

    def f(s):
        return float(w @ nc.gru_forward(stack, s))

    fd_seq = central_fd(f, seq.copy())
    assert np.linalg.norm(dseq - fd_seq) / np.linalg.norm(fd_seq) < 1e-3
    for li, cell in enumerate(stack.cells):
        for name, arr in cell.named_arrays():
            fd = central_fd(lambda _: f(seq), arr)
            err = np.linalg.norm(grads[li][name] - fd) / max(np.linalg.norm(fd), 1e-12)
            assert err < 1e-3, (li, name, err)


def test_adam_zero_gradient_no_decay_is_noop():
    p = [np.array([1.5, -2.0])]
    state = nc.AdamState.zeros_like(p)
    nc.adam_step(p, [np.zeros(2)], state, lr=1e-3)
    np.testing.assert_array_equal(p[0], [1.5, -2.0])


def test_adam_first_step_hand_computed():
    # one scalar, g = 0.5: m1 = 0.05, v1 = 0.00025; m_hat = 0.5, v_hat = 0.25
    # update = lr * 0.5 / (0.5 + 1e-8)
    p = [np.array([2.0])]
    state = nc.AdamState.zeros_like(p)
    nc.adam_step(p, [np.array([0.5])], state, lr=0.1)
    assert p[0][0] == pytest.approx(2.0 - 0.1 * 0.5 / (0.5 + 1e-8), abs=1e-15)
    # second step, same gradient
    m2 = 0.9 * 0.05 + 0.1 * 0.5
    v2 = 0.999 * 0.00025 + 0.001 * 0.25
    expected = p[0][0] - 0.1 * (m2 / (1 - 0.81)) / (np.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
    nc.adam_step(p, [np.array([0.5])], state, lr=0.1)
    assert p[0][0] == pytest.approx(expected, abs=1e-14)


def test_adam_decay_only_step_shrinks_toward_zero():
    # L2 decay enters the gradient, so Adam normalises it: the first step
    # moves each parameter by lr * g/(|g| + eps) with g = decay * p.
    p = [np.array([0.8, -0.3])]
    state = nc.AdamState.zeros_like(p)
    lr, decay = 1e-3, 1e-6
    g = decay * np.array([0.8, -0.3])
    expected = np.array([0.8, -0.3]) - lr * g / (np.abs(g) + 1e-8)
    nc.adam_step(p, [np.zeros(2)], state, lr=lr, weight_decay=decay)
    np.testing.assert_allclose(p[0], expected, rtol=0, atol=1e-15)
    assert np.all(np.abs(p[0]) < [0.8, 0.3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_relu_nonnegative_and_gates_in_unit_interval(values):
    x = np.array(values)
    assert np.all(nc._activate("relu", x) >= 0)
    s = nc._activate("sigmoid", x)
    assert np.all((s >= 0) & (s <= 1))
