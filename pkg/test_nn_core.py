"""
Test script for the tape, LSTM cells, attention, losses, dropout, RMSProp,
gradient checking and the checkpoint codec
"""

import math
import os
import tempfile

import numpy as np

from nn_core import (
    RMSProp,
    ParamSet,
    Tape,
    add_lstm,
    attended_output,
    attention,
    bilstm_encode,
    dropout,
    grad_check,
    load_checkpoint,
    lstm_step,
    rmsprop_step,
    save_checkpoint,
    softmax_nll_smoothed,
)
from utils import CorruptCheckpoint, EmptySequence, NonFinite, ShapeMismatch, TargetOutOfRange, ValidationError

F64 = np.float64


def double_params(seed=0):
    return ParamSet(seed=seed, init_range=0.5, dtype=F64)


def expect(error, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except error as e:
        return e
    raise AssertionError(f"{fn.__name__} did not raise {error.__name__}")


def test_lstm_step_zero_weights():
    params = ParamSet(seed=0)
    params.add("cell.W", (5, 8), init="zeros")
    params.add("cell.b", (8,), init="zeros")
    tape = Tape()
    x = tape.const(np.random.default_rng(0).normal(size=(2, 3)))
    h, c = lstm_step(tape, (tape.zeros((2, 2)), tape.zeros((2, 2))), x, params, "cell")
    assert np.all(h.data == 0) and np.all(c.data == 0)


def test_lstm_forget_gate_saturation():
    params = ParamSet(seed=0, dtype=F64)
    params.add("cell.W", (5, 8), init="zeros")
    params.add("cell.b", (8,), init="zeros")
    params["cell.b"].data[2:4] = 50.0
    tape = Tape(dtype=F64)
    c_prev = tape.const([[0.3, -0.7]])
    _, c = lstm_step(tape, (tape.zeros((1, 2)), c_prev), tape.const([[1.0, 2.0, 3.0]]), params, "cell")
    assert np.allclose(c.data, c_prev.data, atol=1e-12)


def test_lstm_step_shape_mismatch():
    params = ParamSet(seed=0)
    add_lstm(params, "cell", 3, 2)
    tape = Tape()
    expect(ShapeMismatch, lstm_step, tape, (tape.zeros((1, 2)), tape.zeros((1, 2))), tape.const(np.ones((1, 4))),
           params, "cell")


def test_lstm_step_gradients():
    params = double_params(1)
    add_lstm(params, "cell", 3, 4)
    params["cell.b"].data[:] = np.random.default_rng(2).normal(size=16)
    x = np.random.default_rng(3).normal(size=(2, 3))
    h0 = np.random.default_rng(4).normal(size=(2, 4)) * 0.5

    def loss(tape):
        h, c = lstm_step(tape, (tape.const(h0), tape.const(h0)), tape.const(x), params, "cell")
        return tape.add(tape.sum(tape.mul(h, h)), tape.sum(c))

    assert grad_check(loss, params) < 1e-4


def build_bilstm(n_in=3, n=4, seed=0):
    params = double_params(seed)
    add_lstm(params, "enc.fwd", n_in, n // 2)
    add_lstm(params, "enc.bwd", n_in, n // 2)
    return params


def test_bilstm_shapes():
    params = build_bilstm()
    tape = Tape(dtype=F64)
    xs = np.random.default_rng(0).normal(size=(5, 1, 3))
    enc, summary = bilstm_encode(tape, [tape.const(x) for x in xs], np.ones((1, 5)), params, "enc")
    assert enc.shape == (1, 5, 4)
    assert summary.shape == (1, 4)
    assert np.allclose(summary.data[0, :2], enc.data[0, 4, :2])
    assert np.allclose(summary.data[0, 2:], enc.data[0, 0, 2:])


def test_bilstm_reversal_swaps_halves():
    params = build_bilstm(seed=3)
    params["enc.bwd.W"].data = params["enc.fwd.W"].data.copy()
    xs = np.random.default_rng(1).normal(size=(5, 1, 3))
    tape = Tape(dtype=F64)
    enc, _ = bilstm_encode(tape, [tape.const(x) for x in xs], np.ones((1, 5)), params, "enc")
    rev, _ = bilstm_encode(tape, [tape.const(x) for x in xs[::-1]], np.ones((1, 5)), params, "enc")
    for t in range(5):
        assert np.allclose(rev.data[0, 4 - t, :2], enc.data[0, t, 2:])
        assert np.allclose(rev.data[0, 4 - t, 2:], enc.data[0, t, :2])


def test_bilstm_padding_matches_unpadded():
    params = build_bilstm(seed=4)
    rng = np.random.default_rng(2)
    short = rng.normal(size=(3, 1, 3))
    padded = np.concatenate([short, np.zeros((2, 1, 3))])
    tape = Tape(dtype=F64)
    enc, summary = bilstm_encode(tape, [tape.const(x) for x in short], np.ones((1, 3)), params, "enc")
    enc_p, summary_p = bilstm_encode(tape, [tape.const(x) for x in padded], np.array([[1, 1, 1, 0, 0]]), params, "enc")
    assert np.allclose(enc.data, enc_p.data[:, :3])
    assert np.allclose(summary.data, summary_p.data)


def test_bilstm_empty_sequence():
    expect(EmptySequence, bilstm_encode, Tape(), [], np.ones((1, 0)), build_bilstm(), "enc")


def test_bilstm_gradients():
    params = build_bilstm(seed=5)
    xs = np.random.default_rng(6).normal(size=(4, 2, 3))

    def loss(tape):
        enc, summary = bilstm_encode(tape, [tape.const(x) for x in xs], np.array([[1, 1, 1, 1], [1, 1, 0, 0]]),
                                     params, "enc")
        return tape.add(tape.sum(tape.mul(enc, enc)), tape.sum(summary))

    assert grad_check(loss, params) < 1e-4


def test_attention_single_key():
    tape = Tape(dtype=F64)
    keys = tape.const([[[0.2, -0.4, 1.5]]])
    weights, context = attention(tape, tape.const([[1.0, 2.0, 3.0]]), keys)
    assert np.allclose(weights.data, [[1.0]])
    assert np.allclose(context.data, keys.data[:, 0])


def test_attention_identical_keys_are_uniform():
    tape = Tape(dtype=F64)
    keys = tape.const(np.tile([0.5, -1.0], (1, 4, 1)))
    weights, _ = attention(tape, tape.const([[3.0, 1.0]]), keys)
    assert np.allclose(weights.data, 0.25)


def test_attention_hand_evaluated():
    tape = Tape(dtype=F64)
    keys = tape.const([[[math.log(2.0), 0.0], [0.0, 5.0]]])
    weights, context = attention(tape, tape.const([[1.0, 0.0]]), keys)
    assert np.allclose(weights.data, [[2 / 3, 1 / 3]], atol=1e-9)
    assert np.allclose(context.data, [[2 / 3 * math.log(2.0), 5 / 3]])


def test_attention_weights_normalized_and_masked():
    rng = np.random.default_rng(8)
    tape = Tape(dtype=F64)
    keys = tape.const(rng.normal(size=(3, 6, 4)))
    mask = np.ones((3, 6), dtype=bool)
    mask[1, 4:] = False
    weights, _ = attention(tape, tape.const(rng.normal(size=(3, 4))), keys, mask)
    assert np.all(weights.data >= 0)
    assert np.allclose(weights.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(weights.data[1, 4:] == 0)


def test_softmax_shift_invariance():
    tape = Tape(dtype=F64)
    scores = np.random.default_rng(1).normal(size=(2, 5))
    assert np.allclose(tape.softmax(tape.const(scores)).data, tape.softmax(tape.const(scores + 40.0)).data)


def test_attended_output():
    tape = Tape(dtype=F64)
    d = tape.const(np.random.default_rng(0).normal(size=(2, 4)))
    zeros = tape.const(np.zeros((4, 3)))
    assert np.all(attended_output(tape, d, d, zeros, zeros).data == 0)

    params = double_params(2)
    params.add("W1", (4, 3))
    params.add("W2", (4, 3))
    out = attended_output(tape, d, d, params["W1"], params["W2"])
    assert np.all(np.abs(out.data) < 1)
    expect(ShapeMismatch, attended_output, tape, d, d, params["W1"], tape.const(np.zeros((3, 3))))


def test_attended_output_gradients():
    params = double_params(3)
    params.add("W1", (4, 3))
    params.add("W2", (5, 3))
    rng = np.random.default_rng(4)
    d, ctx = rng.normal(size=(2, 4)), rng.normal(size=(2, 5))

    def loss(tape):
        out = attended_output(tape, tape.const(d), tape.const(ctx), params["W1"], params["W2"])
        return tape.sum(tape.mul(out, out))

    assert grad_check(loss, params) < 1e-4


def test_smoothed_nll_uniform_logits():
    tape = Tape(dtype=F64)
    for eps in (0.0, 0.1, 0.5):
        loss = softmax_nll_smoothed(tape, tape.const(np.zeros((1, 7))), np.array([3]), eps)
        assert abs(float(loss.data[0]) - math.log(7)) < 1e-9


def test_smoothed_nll_direct_formula():
    tape = Tape(dtype=F64)
    logits = np.array([[1.0, 2.0, 0.5]])
    logp = logits[0] - math.log(np.exp(logits[0]).sum())
    expected = -(0.9 * logp[0] + 0.05 * logp[1] + 0.05 * logp[2])
    loss = softmax_nll_smoothed(tape, tape.const(logits), np.array([0]), 0.1)
    assert abs(float(loss.data[0]) - expected) < 1e-9


def test_smoothed_nll_at_zero_is_nll():
    tape = Tape(dtype=F64)
    logits = np.random.default_rng(5).normal(size=(4, 6))
    target = np.array([0, 5, 2, 2])
    loss = softmax_nll_smoothed(tape, tape.const(logits), target, 0.0)
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    assert np.allclose(loss.data, -log_probs[np.arange(4), target], atol=1e-9)


def test_smoothed_nll_errors():
    tape = Tape(dtype=F64)
    expect(TargetOutOfRange, softmax_nll_smoothed, tape, tape.const(np.zeros((1, 3))), np.array([3]), 0.1)
    expect(ValidationError, softmax_nll_smoothed, tape, tape.const(np.zeros((1, 3))), np.array([0]), 1.0)


def test_smoothed_nll_gradients():
    params = double_params(6)
    params.add("logits", (2, 4))

    def loss(tape):
        return tape.sum(softmax_nll_smoothed(tape, params["logits"], np.array([1, 3]), 0.1))

    assert grad_check(loss, params) < 1e-4


def test_rmsprop_step():
    param, acc = rmsprop_step(np.ones(3), np.zeros(3), np.zeros(3), lr=0.1)
    assert np.all(param == 1.0)

    param, acc = rmsprop_step(np.zeros(1), np.ones(1), np.zeros(1), lr=0.1, rho=0.9, eps=1e-12)
    assert abs(param[0] + 0.316228) < 1e-6
    assert abs(acc[0] - 0.1) < 1e-12

    expect(ShapeMismatch, rmsprop_step, np.zeros(2), np.zeros(3), np.zeros(2), 0.1)


def test_rmsprop_update_converges_to_lr():
    param, acc = np.zeros(1), np.zeros(1)
    for _ in range(500):
        before = param.copy()
        param, acc = rmsprop_step(param, np.full(1, 0.3), acc, lr=0.01, rho=0.9, eps=1e-12)
    assert abs(abs(param[0] - before[0]) - 0.01) < 1e-6


def test_rmsprop_optimizer_clips_and_keeps_state():
    params = ParamSet(seed=0, dtype=F64)
    params.add("w", (2,))
    start = params["w"].data.copy()
    optimizer = RMSProp(params, lr=0.1, clip_norm=1.0)
    optimizer.step()
    assert np.array_equal(params["w"].data, start)

    params["w"].grad = np.array([30.0, 40.0])
    assert optimizer.step() == 50.0
    assert params["w"].grad is None
    assert set(optimizer.state()) == {"rmsprop/w"}
    assert not np.array_equal(params["w"].data, start)


def test_dropout():
    x = Tape().const(np.ones((2, 3)))
    assert dropout(Tape(train=True), x, 0.0) is x
    assert dropout(Tape(train=False), x, 0.5) is x
    expect(ValidationError, dropout, Tape(train=True), x, 1.0)

    tape = Tape(train=True, seed=0, dtype=F64)
    out = dropout(tape, tape.const(np.ones((1, 100000))), 0.3)
    assert abs(out.data.mean() - 1.0) < 0.01
    assert set(np.unique(np.round(out.data, 6)).tolist()) <= {0.0, round(1 / 0.7, 6)}


def test_dropout_is_deterministic_given_seed():
    a = Tape(train=True, seed=4)
    b = Tape(train=True, seed=4)
    x = np.ones((3, 8))
    assert np.array_equal(dropout(a, a.const(x), 0.5).data, dropout(b, b.const(x), 0.5).data)


def test_grad_check_linear_and_fault_injection():
    params = double_params(7)
    params.add("W", (3, 2))
    x = np.array([[0.5, -1.0, 2.0]])

    def linear(tape):
        return tape.sum(tape.matmul(tape.const(x), params["W"]))

    assert grad_check(linear, params) < 1e-8
    corrupted = {"W": np.tile(x.T, (1, 2)) + 1.0}
    assert grad_check(linear, params, analytic=corrupted) > 1e-2


def test_grad_check_non_finite():
    params = double_params(8)
    params.add("W", (1, 1))

    def blow_up(tape):
        return tape.sum(tape.matmul(tape.const([[np.inf]]), params["W"]))

    expect(NonFinite, grad_check, blow_up, params)


def test_param_set():
    params = ParamSet(seed=2)
    params.add("a", (2, 3))
    params.add("b", (3,), init="zeros")
    assert len(params) == 2 and "a" in params and params.num_values() == 9
    assert np.all(params["b"].data == 0)
    assert np.all(np.abs(params["a"].data) <= 0.08)
    expect(ValidationError, params.add, "a", (1,))
    expect(ValidationError, params.add, "c", (1,), "normal")

    tape = Tape()
    tape.backward(tape.sum(tape.mul(params["a"], params["a"])))
    grads = params.grads()
    assert np.all(grads["b"] == 0)
    assert np.allclose(grads["a"], 2 * params["a"].data)

    again = ParamSet(seed=2)
    again.add("a", (2, 3))
    assert np.array_equal(again["a"].data, params["a"].data)


def test_load_state_errors():
    params = ParamSet(seed=0)
    params.add("a", (2,))
    e = expect(CorruptCheckpoint, params.load_state, {"a": np.zeros(3)})
    assert e.tensor_name == "a"
    e = expect(CorruptCheckpoint, params.load_state, {})
    assert e.tensor_name == "a"
    e = expect(CorruptCheckpoint, params.load_state, {"a": np.zeros(2), "b": np.zeros(1)})
    assert e.tensor_name == "b"


def test_checkpoint_round_trip_is_bitwise():
    params = ParamSet(seed=9)
    params.add("enc.W", (7, 12))
    params.add("enc.b", (12,), init="zeros")
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        save_checkpoint(path, params.state(), {"config": {"hidden_size": 6}})
        tensors, header = load_checkpoint(path)
        assert header["config"] == {"hidden_size": 6}
        assert header["payload_bytes"] == 4 * (84 + 12)
        for name, array in params.state().items():
            assert tensors[name].dtype == np.float32
            assert tensors[name].tobytes() == array.tobytes()

        restored = ParamSet(seed=123)
        restored.add("enc.W", (7, 12))
        restored.add("enc.b", (12,), init="zeros")
        restored.load_state(tensors)
        assert all(np.array_equal(restored[n].data, params[n].data) for n in params)


def test_checkpoint_corruption():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        save_checkpoint(path, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
        with open(path, "rb") as fh:
            blob = fh.read()
        with open(path, "wb") as fh:
            fh.write(blob[:-4])
        expect(CorruptCheckpoint, load_checkpoint, path)

        other = os.path.join(tmp, "notes.txt")
        with open(other, "w") as fh:
            fh.write("not a checkpoint")
        expect(CorruptCheckpoint, load_checkpoint, other)


if __name__ == "__main__":
    print("=" * 60)
    print("TESTING: nn_core")
    print("=" * 60)
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✅ {name}")
