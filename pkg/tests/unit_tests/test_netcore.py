import math
from pathlib import Path
from typing import Tuple

import numpy as np
import pytest

from autophoto._utilities import FormatError, NumericalError
from autophoto.netcore import (
    DenseLayer,
    LSTMCellLayer,
    NetSpec,
    RecurrentState,
    adam_init,
    adam_step,
    backward,
    finite_diff_check,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    zero_state,
)


def recurrent_spec() -> NetSpec:
    return NetSpec(
        layers=(
            DenseLayer(n_in=5, n_out=6, activation="tanh"),
            DenseLayer(n_in=6, n_out=4, activation="tanh"),
            LSTMCellLayer(n_in=4, hidden=3),
            DenseLayer(n_in=3, n_out=2, activation="identity"),
        )
    )


def squared_loss(output: np.ndarray) -> Tuple[float, np.ndarray]:
    target = np.linspace(-0.5, 0.5, output.shape[-1])
    diff = output - target
    return float(0.5 * np.sum(diff**2)), diff


def test_incompatible_layers_are_rejected() -> None:
    with pytest.raises(ValueError):
        NetSpec(layers=(DenseLayer(n_in=3, n_out=4), DenseLayer(n_in=5, n_out=1)))


def test_at_most_one_lstm_cell() -> None:
    with pytest.raises(ValueError):
        NetSpec(layers=(LSTMCellLayer(n_in=3, hidden=3), LSTMCellLayer(n_in=3, hidden=3)))


def test_param_count_and_offsets() -> None:
    spec = recurrent_spec()
    assert spec.param_count == (5 * 6 + 6) + (6 * 4 + 4) + 4 * 3 * (4 + 3 + 1) + (3 * 2 + 2)
    assert spec.offsets[-1][1] == spec.param_count
    assert spec.hidden_size == 3


def test_identity_dense_layer_passes_input_through() -> None:
    spec = NetSpec(layers=(DenseLayer(n_in=3, n_out=3, activation="identity"),))
    params = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
    x = np.array([0.3, -1.2, 4.0])
    np.testing.assert_array_equal(forward(spec, params, x)[0], x)


def test_zero_params_give_zero_output() -> None:
    spec = NetSpec.mlp([4, 8, 8, 2], activation="tanh", output_activation="tanh")
    out, _, _ = forward(spec, np.zeros(spec.param_count), np.array([1.0, -2.0, 3.0, 0.5]))
    np.testing.assert_array_equal(out, np.zeros(2))


def test_forward_matches_scalar_loops() -> None:
    spec = NetSpec(
        layers=(DenseLayer(n_in=3, n_out=4, activation="tanh"), LSTMCellLayer(n_in=4, hidden=2))
    )
    rng = np.random.default_rng(0)
    params = rng.normal(size=spec.param_count)
    x = rng.normal(size=3)
    state = RecurrentState(rng.normal(size=2), rng.normal(size=2))
    out, new_state, _ = forward(spec, params, x, state)

    w = params[:12].reshape(3, 4)
    b = params[12:16]
    a = [math.tanh(sum(x[i] * w[i, j] for i in range(3)) + b[j]) for j in range(4)]
    lstm = params[16:]
    wx = lstm[: 4 * 8].reshape(4, 8)
    wh = lstm[32 : 32 + 2 * 8].reshape(2, 8)
    bias = lstm[48:]

    def sigmoid(z: float) -> float:
        return 1.0 / (1.0 + math.exp(-z))

    hidden, cell = [], []
    for k in range(2):
        z = [
            sum(a[i] * wx[i, g * 2 + k] for i in range(4))
            + sum(state.hidden[i] * wh[i, g * 2 + k] for i in range(2))
            + bias[g * 2 + k]
            for g in range(4)
        ]
        c = sigmoid(z[1]) * state.cell[k] + sigmoid(z[0]) * math.tanh(z[2])
        cell.append(c)
        hidden.append(sigmoid(z[3]) * math.tanh(c))
    np.testing.assert_allclose(out, hidden, atol=1e-12)
    np.testing.assert_allclose(new_state.cell, cell, atol=1e-12)


def test_forward_is_bit_deterministic() -> None:
    spec = recurrent_spec()
    params = init_params(spec, np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(4, 5))
    a = forward(spec, params, x, zero_state(spec, 4))
    b = forward(spec, params, x, zero_state(spec, 4))
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1].cell.tobytes() == b[1].cell.tobytes()


def test_forward_rejects_bad_inputs() -> None:
    spec = NetSpec.mlp([3, 2])
    params = np.zeros(spec.param_count)
    with pytest.raises(ValueError):
        forward(spec, params, np.zeros(4))
    with pytest.raises(NumericalError):
        forward(spec, params, np.array([0.0, np.nan, 1.0]))


def test_lstm_zero_state_contract() -> None:
    spec = NetSpec(layers=(LSTMCellLayer(n_in=3, hidden=4),))
    _, state, _ = forward(spec, np.zeros(spec.param_count), np.zeros(3), zero_state(spec))
    np.testing.assert_array_equal(state.hidden, np.zeros(4))
    np.testing.assert_array_equal(state.cell, np.zeros(4))


def test_linear_net_gradients() -> None:
    spec = NetSpec(layers=(DenseLayer(n_in=3, n_out=1, activation="identity"),))
    x = np.array([0.5, -2.0, 3.0])
    _, _, tape = forward(spec, np.ones(4), x)
    grads, input_grad, _ = backward(tape, np.array([1.0]))
    np.testing.assert_array_equal(grads, [0.5, -2.0, 3.0, 1.0])
    np.testing.assert_array_equal(input_grad, np.ones(3))


def test_zero_output_gradient_gives_zero_grads() -> None:
    spec = recurrent_spec()
    params = init_params(spec, np.random.default_rng(3))
    _, _, tape = forward(spec, params, np.ones(5))
    grads, input_grad, state_grad = backward(tape, np.zeros(2))
    assert not grads.any() and not input_grad.any()
    assert not state_grad.hidden.any() and not state_grad.cell.any()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_finite_differences(seed: int) -> None:
    spec = recurrent_spec()
    rng = np.random.default_rng(seed)
    params = rng.normal(0.0, 0.5, spec.param_count)
    x = rng.normal(size=5)
    state = RecurrentState(rng.normal(0, 0.5, 3), rng.normal(0, 0.5, 3))
    assert finite_diff_check(spec, params, x, squared_loss, h=1e-5, state=state) <= 1e-4


def test_backward_through_time_matches_finite_differences() -> None:
    spec = NetSpec(layers=(DenseLayer(n_in=2, n_out=3), LSTMCellLayer(n_in=3, hidden=3)))
    rng = np.random.default_rng(5)
    params = rng.normal(0.0, 0.5, spec.param_count)
    xs = rng.normal(size=(4, 2))

    def loss_and_tapes(p: np.ndarray) -> Tuple[float, list]:
        state, tapes, loss, outs = zero_state(spec), [], 0.0, []
        for x in xs:
            out, state, tape = forward(spec, p, x, state)
            tapes.append(tape)
            outs.append(out)
            loss += 0.5 * float(np.sum(out**2))
        return loss, list(zip(tapes, outs))

    _, record = loss_and_tapes(params)
    grads = np.zeros_like(params)
    carry = None
    for tape, out in reversed(record):
        g, _, carry = backward(tape, out, carry)
        grads += g

    h = 1e-5
    for k in range(params.size):
        plus, minus = params.copy(), params.copy()
        plus[k] += h
        minus[k] -= h
        numeric = (loss_and_tapes(plus)[0] - loss_and_tapes(minus)[0]) / (2 * h)
        assert abs(numeric - grads[k]) <= 1e-4 * max(abs(numeric), abs(grads[k]), 1e-6)


def test_corrupted_gradient_is_detected() -> None:
    spec = recurrent_spec()
    rng = np.random.default_rng(7)
    params = rng.normal(0.0, 0.5, spec.param_count)
    x = rng.normal(size=5)
    _, _, tape = forward(spec, params, x)
    good = backward(tape, squared_loss(forward(spec, params, x)[0])[1])[0]
    bad = good.copy()
    bad[3] += 1.0
    assert finite_diff_check(spec, params, x, squared_loss, analytic=bad) > 1e-2


def test_empty_net_has_zero_error() -> None:
    spec = NetSpec()
    assert finite_diff_check(spec, np.zeros(0), np.ones(3), squared_loss) == 0.0


def test_adam_zero_grads_leave_params() -> None:
    params = np.array([1.0, -2.0])
    updated, _ = adam_step(params, np.zeros(2), adam_init(2), lr=0.1)
    np.testing.assert_array_equal(updated, params)


def test_adam_first_step_moves_by_lr_against_gradient() -> None:
    params = np.zeros(3)
    updated, state = adam_step(params, np.array([2.0, -0.5, 1e-3]), adam_init(3), lr=0.01)
    np.testing.assert_allclose(updated, [-0.01, 0.01, -0.01], rtol=1e-4)
    assert state.t == 1


def test_adam_minimizes_a_quadratic() -> None:
    w, state = np.array([1.0]), adam_init(1)
    for _ in range(200):
        w, state = adam_step(w, 2.0 * w, state, lr=0.1)
    assert abs(w[0]) < 0.1


def test_adam_rejects_non_finite_gradients() -> None:
    with pytest.raises(NumericalError):
        adam_step(np.zeros(2), np.array([np.inf, 0.0]), adam_init(2), lr=0.1)


def test_checkpoint_round_trip(tmp_path: Path) -> None:
    spec = recurrent_spec()
    params = init_params(spec, np.random.default_rng(9))
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, {"body": spec}, params, {"version": "x"})
    checkpoint = load_checkpoint(path)
    assert checkpoint.nets == {"body": spec}
    assert checkpoint.params.tobytes() == params.tobytes()
    assert checkpoint.extra == {"version": "x"}
    assert path.read_bytes().startswith(b"autophoto-ckpt/1\n")


def test_checkpoint_rejects_garbage(tmp_path: Path) -> None:
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"hello")
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"autophoto-ckpt/1\n\x05\x00")
    with pytest.raises(FormatError):
        load_checkpoint(path)
