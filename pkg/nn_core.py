# -*- coding: utf-8 -*-
"""
Neural Core Module
A minimal reverse-mode differentiation engine over numpy arrays: tensors, a tape,
LSTM cells, attention, smoothed losses, dropout, RMSProp, gradient checking,
and the checkpoint codec.
"""

import io
import json
import logging
import os
from collections import OrderedDict
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from utils import (
    CorruptCheckpoint,
    EmptySequence,
    NonFinite,
    ShapeMismatch,
    TargetOutOfRange,
    ValidationError,
)

logger = logging.getLogger(__name__)

DTYPE = np.float32
CHECKPOINT_MAGIC = b"C2F-CHECKPOINT 1\n"


class Tensor:
    """A dense array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, name: Optional[str] = None):
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class ParamSet:
    """Named trainable tensors with fixed shapes."""

    def __init__(self, seed: int = 0, init_range: float = 0.08, dtype=DTYPE):
        self.rng = np.random.default_rng(seed)
        self.init_range = init_range
        self.dtype = dtype
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, shape: Sequence[int], init: str = "uniform") -> Tensor:
        """
        Register a parameter.

        Args:
            name: Unique parameter name
            shape: Fixed shape
            init: "uniform" for U(-init_range, init_range), "zeros" for biases

        Returns:
            The parameter tensor
        """
        if name in self._params:
            raise ValidationError(f"duplicate parameter name '{name}'")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "uniform":
            data = self.rng.uniform(-self.init_range, self.init_range, size=shape).astype(self.dtype)
        else:
            raise ValidationError(f"unknown initializer '{init}'")
        param = Tensor(data, requires_grad=True, name=name)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        """Gradient per parameter; parameters the last pass did not touch get zeros."""
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self._params.items()
        }

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self._params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into existing parameters; shapes must match exactly."""
        for name, param in self._params.items():
            if name not in state:
                raise CorruptCheckpoint("missing parameter", tensor_name=name)
            array = np.asarray(state[name])
            if array.shape != param.data.shape:
                raise CorruptCheckpoint(
                    f"shape {array.shape} does not match expected {param.data.shape}", tensor_name=name
                )
            param.data = array.astype(self.dtype, copy=True)
        extra = set(state) - set(self._params)
        if extra:
            raise CorruptCheckpoint("unexpected parameter", tensor_name=sorted(extra)[0])

    def astype(self, dtype) -> "ParamSet":
        """Copy of the parameter set in another precision (float64 for gradient checks)."""
        clone = ParamSet(init_range=self.init_range, dtype=dtype)
        for name, param in self._params.items():
            clone._params[name] = Tensor(param.data.astype(dtype, copy=True), requires_grad=True, name=name)
        return clone

    def num_values(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Tape:
    """
    Records one forward pass and replays it backwards.

    Nodes are appended in creation order, which is a topological order, so the
    backward pass walks them once in reverse.
    """

    def __init__(self, train: bool = False, seed: Optional[int] = None, record: bool = True, dtype=DTYPE):
        self.train = train
        self.record = record
        self.dtype = dtype
        self.rng = np.random.default_rng(seed)
        self.nodes: List[Tuple[Tuple[Tensor, ...], Callable]] = []

    # -- plumbing ---------------------------------------------------------

    def const(self, array) -> Tensor:
        return Tensor(np.asarray(array, dtype=self.dtype))

    def zeros(self, shape: Sequence[int]) -> Tensor:
        return Tensor(np.zeros(tuple(shape), dtype=self.dtype))

    def _out(self, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
        needs = self.record and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs)
        if needs:
            self.nodes.append(((out,), lambda grads: backward(grads[0])))
        return out

    def backward(self, loss: Tensor) -> None:
        """Propagate d loss / d x into every recorded tensor and parameter."""
        if loss.data.size != 1:
            raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise NonFinite(f"loss is not finite: {loss.data}")
        loss.grad = np.ones_like(loss.data)
        for outs, fn in reversed(self.nodes):
            if any(o.grad is not None for o in outs):
                fn([o.grad for o in outs])
        self.nodes = []

    # -- elementwise ------------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        def backward(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))
        return self._out(a.data + b.data, (a, b), backward)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        def backward(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(-g, b.shape))
        return self._out(a.data - b.data, (a, b), backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        def backward(g):
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
            _accumulate(b, _unbroadcast(g * a.data, b.shape))
        return self._out(a.data * b.data, (a, b), backward)

    def scale(self, a: Tensor, factor: float) -> Tensor:
        return self._out(a.data * factor, (a,), lambda g: _accumulate(a, g * factor))

    def tanh(self, a: Tensor) -> Tensor:
        y = np.tanh(a.data)
        return self._out(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)))

    def sigmoid(self, a: Tensor) -> Tensor:
        y = _sigmoid(a.data)
        return self._out(y, (a,), lambda g: _accumulate(a, g * y * (1.0 - y)))

    def log(self, a: Tensor) -> Tensor:
        if np.any(a.data <= 0):
            raise NonFinite("log of a non-positive value")
        return self._out(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))

    def where(self, cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
        """Row-wise select: rows with cond[b] true come from a, others from b."""
        c = np.asarray(cond, dtype=bool).reshape((-1,) + (1,) * (a.data.ndim - 1))

        def backward(g):
            _accumulate(a, np.where(c, g, 0.0).astype(g.dtype))
            _accumulate(b, np.where(c, 0.0, g).astype(g.dtype))
        return self._out(np.where(c, a.data, b.data), (a, b), backward)

    def dropout(self, x: Tensor, rate: float) -> Tensor:
        """Inverted dropout in training mode, identity otherwise."""
        if not 0 <= rate < 1:
            raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
        if not self.train or rate == 0:
            return x
        keep = (self.rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
        return self._out(x.data * keep, (x,), lambda g: _accumulate(x, g * keep))

    # -- shapes -----------------------------------------------------------

    def matmul(self, x: Tensor, w: Tensor) -> Tensor:
        if x.shape[-1] != w.shape[0]:
            raise ShapeMismatch(f"matmul {x.shape} @ {w.shape}")

        def backward(g):
            _accumulate(x, g @ w.data.T)
            if w.requires_grad:
                _accumulate(w, x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        return self._out(x.data @ w.data, (x, w), backward)

    def concat(self, parts: Sequence[Tensor], axis: int = -1) -> Tensor:
        data = np.concatenate([p.data for p in parts], axis=axis)
        bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

        def backward(g):
            for p, piece in zip(parts, np.split(g, bounds, axis=axis)):
                _accumulate(p, piece)
        return self._out(data, tuple(parts), backward)

    def stack(self, parts: Sequence[Tensor], axis: int = 1) -> Tensor:
        data = np.stack([p.data for p in parts], axis=axis)

        def backward(g):
            for i, p in enumerate(parts):
                _accumulate(p, np.take(g, i, axis=axis))
        return self._out(data, tuple(parts), backward)

    def reshape(self, x: Tensor, shape: Sequence[int]) -> Tensor:
        return self._out(x.data.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(x.shape)))

    def narrow(self, x: Tensor, start: int, stop: int) -> Tensor:
        """x[..., start:stop]."""
        def backward(g):
            full = np.zeros_like(x.data)
            full[..., start:stop] = g
            _accumulate(x, full)
        return self._out(x.data[..., start:stop], (x,), backward)

    def bmm(self, a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
        """Batched matrix product a @ b (or a @ b^T) over a leading batch axis."""
        bt = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
        if a.shape[-1] != bt.shape[-2]:
            raise ShapeMismatch(f"bmm {a.shape} @ {bt.shape}")

        def backward(g):
            _accumulate(a, g @ np.swapaxes(bt, -1, -2))
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, np.swapaxes(gb, -1, -2) if transpose_b else gb)
        return self._out(a.data @ bt, (a, b), backward)

    def step(self, x: Tensor, t: int) -> Tensor:
        """x[:, t] of a (B, T, ...) tensor."""
        def backward(g):
            full = np.zeros_like(x.data)
            full[:, t] = g
            _accumulate(x, full)
        return self._out(x.data[:, t], (x,), backward)

    def embed(self, table: Tensor, ids: np.ndarray) -> Tensor:
        """Rows of an embedding matrix."""
        ids = np.asarray(ids, dtype=np.int64)

        def backward(g):
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            _accumulate(table, full)
        return self._out(table.data[ids], (table,), backward)

    def take(self, x: Tensor, idx: np.ndarray) -> Tensor:
        """x[b, idx[b]] for a (B, T, ...) tensor."""
        idx = np.asarray(idx, dtype=np.int64)
        rows = np.arange(x.shape[0])

        def backward(g):
            full = np.zeros_like(x.data)
            np.add.at(full, (rows, idx), g)
            _accumulate(x, full)
        return self._out(x.data[rows, idx], (x,), backward)

    def gather_steps(self, states: Sequence[Tensor], idx: np.ndarray) -> Tensor:
        """Row b of states[idx[b]] for a list of (B, n) tensors."""
        idx = np.asarray(idx, dtype=np.int64)
        rows = np.arange(len(idx))
        data = np.stack([states[j].data[b] for b, j in zip(rows, idx)])
        used = sorted(set(idx.tolist()))

        def backward(g):
            for j in used:
                part = np.zeros_like(states[j].data)
                sel = idx == j
                part[sel] = g[sel]
                _accumulate(states[j], part)
        return self._out(data, tuple(states[j] for j in used), backward)

    def sum(self, x: Tensor, axis: Optional[int] = None) -> Tensor:
        def backward(g):
            if axis is None:
                _accumulate(x, np.broadcast_to(g, x.shape).astype(x.data.dtype))
            else:
                _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.data.dtype))
        return self._out(np.asarray(x.data.sum(axis=axis)), (x,), backward)

    def weighted_total(self, x: Tensor, weights: np.ndarray) -> Tensor:
        """Scalar Σ weights * x; weights double as a padding mask."""
        w = np.asarray(weights, dtype=x.data.dtype)
        return self._out(np.asarray((x.data * w).sum()), (x,), lambda g: _accumulate(x, g * w))

    def pick(self, x: Tensor, idx: np.ndarray) -> Tensor:
        """x[b, idx[b]] for a (B, V) tensor."""
        idx = np.asarray(idx, dtype=np.int64)
        rows = np.arange(x.shape[0])

        def backward(g):
            full = np.zeros_like(x.data)
            full[rows, idx] = g
            _accumulate(x, full)
        return self._out(x.data[rows, idx], (x,), backward)

    # -- attention and softmax ---------------------------------------------

    def bdot(self, keys: Tensor, query: Tensor) -> Tensor:
        """Dot product of every key with its row's query: (B, T, n), (B, n) -> (B, T)."""
        if keys.shape[-1] != query.shape[-1]:
            raise ShapeMismatch(f"query size {query.shape[-1]} != key size {keys.shape[-1]}")

        def backward(g):
            _accumulate(keys, g[:, :, None] * query.data[:, None, :])
            _accumulate(query, np.einsum("bt,btn->bn", g, keys.data))
        return self._out(np.einsum("btn,bn->bt", keys.data, query.data), (keys, query), backward)

    def softmax(self, scores: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        """Softmax over the last axis; masked-out entries get probability 0."""
        z = scores.data
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            z = np.where(mask, z, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            _accumulate(scores, p * (g - (g * p).sum(axis=-1, keepdims=True)))
        return self._out(p, (scores,), backward)

    def log_softmax(self, scores: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        """Log-probabilities over the last axis; masked-out entries read 0 and pass no gradient."""
        allowed = np.ones(scores.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
        z = np.where(allowed, scores.data, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        p = np.exp(z - log_norm)
        out = np.where(allowed, z - log_norm, 0.0).astype(scores.data.dtype)

        def backward(g):
            gm = np.where(allowed, g, 0.0)
            _accumulate(scores, (gm - p * gm.sum(axis=-1, keepdims=True)).astype(scores.data.dtype))
        return self._out(out, (scores,), backward)

    def logsumexp(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """log Σ_{mask} exp(x) over the last axis; every row needs one allowed entry."""
        allowed = np.asarray(mask, dtype=bool)
        if not np.all(allowed.any(axis=-1)):
            raise NonFinite("logsumexp over an empty selection")
        z = np.where(allowed, x.data, -np.inf)
        top = z.max(axis=-1, keepdims=True)
        total = np.exp(z - top).sum(axis=-1, keepdims=True)
        p = np.exp(z - top) / total

        def backward(g):
            _accumulate(x, (g[..., None] * p).astype(x.data.dtype))
        return self._out((np.log(total) + top)[..., 0].astype(x.data.dtype), (x,), backward)

    def log_sigmoid(self, z: Tensor) -> Tensor:
        """log σ(z), stable for large |z|."""
        y = -np.logaddexp(0.0, -z.data)
        return self._out(y.astype(z.data.dtype), (z,), lambda g: _accumulate(z, g * _sigmoid(-z.data)))

    def weighted_sum(self, weights: Tensor, values: Tensor) -> Tensor:
        """Σ_k w[b, k] * values[b, k]: (B, T), (B, T, n) -> (B, n)."""
        def backward(g):
            _accumulate(weights, np.einsum("bn,btn->bt", g, values.data))
            _accumulate(values, weights.data[:, :, None] * g[:, None, :])
        return self._out(np.einsum("bt,btn->bn", weights.data, values.data), (weights, values), backward)

    def softmax_nll(self, logits: Tensor, target: np.ndarray, eps: float = 0.0,
                    mask: Optional[np.ndarray] = None) -> Tensor:
        """Per-row cross-entropy against the ε-smoothed target over the allowed classes."""
        target = np.asarray(target, dtype=np.int64)
        B, K = logits.shape
        allowed = np.ones((B, K), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        rows = np.arange(B)
        if np.any(target < 0) or np.any(target >= K) or not np.all(allowed[rows, target]):
            raise TargetOutOfRange(f"targets {target.tolist()} outside the {K} allowed classes")

        z = np.where(allowed, logits.data, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = np.where(allowed, z - log_norm, 0.0)
        p = np.where(allowed, np.exp(z - log_norm), 0.0)

        counts = allowed.sum(axis=-1, keepdims=True)
        off = np.where(counts > 1, eps / np.maximum(counts - 1, 1), 0.0)
        q = np.where(allowed, off, 0.0)
        on = np.where(counts[:, 0] > 1, 1.0 - eps, 1.0)
        q[rows, target] = on
        loss = -(q * logp).sum(axis=-1)

        def backward(g):
            _accumulate(logits, (g[:, None] * (p - q)).astype(logits.data.dtype))
        return self._out(loss.astype(logits.data.dtype), (logits,), backward)

    # -- recurrent --------------------------------------------------------

    def lstm_step(self, x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor,
                  mask: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        """
        One LSTM step with gates ordered input, forget, output, candidate.

        Rows whose mask is 0 keep their previous state.
        """
        n_in = x.shape[-1]
        k = h.shape[-1]
        if w.shape != (n_in + k, 4 * k) or b.shape != (4 * k,):
            raise ShapeMismatch(f"LSTM weights {w.shape}/{b.shape} do not fit input {n_in} and state {k}")

        xh = np.concatenate([x.data, h.data], axis=-1)
        z = xh @ w.data + b.data
        i = _sigmoid(z[:, :k])
        f = _sigmoid(z[:, k:2 * k])
        o = _sigmoid(z[:, 2 * k:3 * k])
        cand = np.tanh(z[:, 3 * k:])
        c_new = f * c.data + i * cand
        tc = np.tanh(c_new)
        h_new = o * tc

        m = None
        if mask is not None:
            m = np.asarray(mask, dtype=x.data.dtype).reshape(-1, 1)
            h_new = m * h_new + (1.0 - m) * h.data
            c_new = m * c_new + (1.0 - m) * c.data

        h_out = Tensor(h_new)
        c_out = Tensor(c_new)
        parents = (x, h, c, w, b)
        if not (self.record and any(p.requires_grad for p in parents)):
            return h_out, c_out
        h_out.requires_grad = c_out.requires_grad = True

        def backward(grads):
            gh_out = grads[0] if grads[0] is not None else np.zeros_like(h_new)
            gc_out = grads[1] if grads[1] is not None else np.zeros_like(c_new)
            if m is not None:
                gh = m * gh_out
                gc = m * gc_out + gh * o * (1.0 - tc * tc)
                gh_carry = (1.0 - m) * gh_out
                gc_carry = (1.0 - m) * gc_out
            else:
                gh = gh_out
                gc = gc_out + gh * o * (1.0 - tc * tc)
                gh_carry = gc_carry = 0.0
            dz = np.concatenate([
                gc * cand * i * (1.0 - i),
                gc * c.data * f * (1.0 - f),
                gh * tc * o * (1.0 - o),
                gc * i * (1.0 - cand * cand),
            ], axis=-1)
            _accumulate(w, xh.T @ dz)
            _accumulate(b, dz.sum(axis=0))
            dxh = dz @ w.data.T
            _accumulate(x, dxh[:, :n_in])
            _accumulate(h, dxh[:, n_in:] + gh_carry)
            _accumulate(c, gc * f + gc_carry)

        self.nodes.append(((h_out, c_out), backward))
        return h_out, c_out


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def add_lstm(params: ParamSet, prefix: str, input_size: int, hidden: int) -> None:
    """Register one LSTM's weights: uniform recurrent matrix, zero biases."""
    params.add(f"{prefix}.W", (input_size + hidden, 4 * hidden))
    params.add(f"{prefix}.b", (4 * hidden,), init="zeros")


def lstm_step(tape: Tape, state: Tuple[Tensor, Tensor], x: Tensor, params: ParamSet, prefix: str,
              mask: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """Advance (h, c) by one input."""
    h, c = state
    return tape.lstm_step(x, h, c, params[f"{prefix}.W"], params[f"{prefix}.b"], mask)


def bilstm_encode(tape: Tape, inputs: Sequence[Tensor], mask: np.ndarray, params: ParamSet,
                  prefix: str) -> Tuple[Tensor, Tensor]:
    """
    Bi-directional LSTM over a padded batch.

    Args:
        tape: Active tape
        inputs: One (B, d) tensor per position
        mask: (B, T) with 1 at real positions; padding must be a suffix
        params: Parameter set holding "<prefix>.fwd" and "<prefix>.bwd" LSTMs
        prefix: Parameter name prefix

    Returns:
        (encodings (B, T, n), summary of shape (B, n): forward state at the last real token joined with the backward state at the first)
    """
    if len(inputs) == 0:
        raise EmptySequence("cannot encode an empty sequence")
    mask = np.asarray(mask, dtype=bool)
    B = inputs[0].shape[0]
    half = params[f"{prefix}.fwd.b"].shape[0] // 4
    T = len(inputs)

    state = (tape.zeros((B, half)), tape.zeros((B, half)))
    forward: List[Tensor] = []
    for t in range(T):
        state = lstm_step(tape, state, inputs[t], params, f"{prefix}.fwd", mask[:, t])
        forward.append(state[0])
    last_forward = state[0]

    state = (tape.zeros((B, half)), tape.zeros((B, half)))
    backward: List[Optional[Tensor]] = [None] * T
    for t in reversed(range(T)):
        state = lstm_step(tape, state, inputs[t], params, f"{prefix}.bwd", mask[:, t])
        backward[t] = state[0]

    outputs = [tape.concat([forward[t], backward[t]]) for t in range(T)]
    return tape.stack(outputs, axis=1), tape.concat([last_forward, backward[0]])


def attention(tape: Tape, query: Tensor, keys: Tensor, mask: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """
    Dot-product attention: masked softmax over query-key dot products, context is the weighted sum of keys.

    Returns:
        (weights (B, T), context (B, n))
    """
    if mask is None:
        mask = np.ones(keys.shape[:2], dtype=bool)
    weights = tape.softmax(tape.bdot(keys, query), mask)
    return weights, tape.weighted_sum(weights, keys)


def attended_output(tape: Tape, d: Tensor, context: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """tanh(W_1 d + W_2 context)."""
    if d.shape[-1] != w1.shape[0] or context.shape[-1] != w2.shape[0]:
        raise ShapeMismatch(f"attended output: {d.shape}, {context.shape} vs {w1.shape}, {w2.shape}")
    return tape.tanh(tape.add(tape.matmul(d, w1), tape.matmul(context, w2)))


def softmax_nll_smoothed(tape: Tape, logits: Tensor, target: np.ndarray, eps: float,
                         mask: Optional[np.ndarray] = None) -> Tensor:
    """Cross-entropy against 1-ε on the target and ε/(K-1) on every other allowed class."""
    if not 0 <= eps < 1:
        raise ValidationError(f"label smoothing must be in [0, 1), got {eps}")
    return tape.softmax_nll(logits, target, eps, mask)


def dropout(tape: Tape, x: Tensor, rate: float) -> Tensor:
    return tape.dropout(x, rate)


def scoring_network(tape: Tape, parts: Sequence[Tensor], params: ParamSet, prefix: str) -> Tensor:
    """
    One tanh hidden layer over the concatenation of parts, then a linear score.

    Parts may carry extra middle axes (e.g. one row per column); the projection of
    each part is added with broadcasting, which equals projecting the concatenation.
    """
    hidden = params[f"{prefix}.b4"]
    total = None
    for j, part in enumerate(parts):
        proj = tape.matmul(part, params[f"{prefix}.W4_{j}"])
        total = proj if total is None else tape.add(total, proj)
    act = tape.tanh(tape.add(total, hidden))
    w3 = params[f"{prefix}.w3"]
    score = tape.matmul(act, w3)
    return tape.reshape(score, score.shape[:-1])


def add_scoring_network(params: ParamSet, prefix: str, part_sizes: Sequence[int], hidden: int) -> None:
    for j, size in enumerate(part_sizes):
        params.add(f"{prefix}.W4_{j}", (size, hidden))
    params.add(f"{prefix}.b4", (hidden,), init="zeros")
    params.add(f"{prefix}.w3", (hidden, 1))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def rmsprop_step(param: np.ndarray, grad: np.ndarray, acc: np.ndarray, lr: float,
                 rho: float = 0.95, eps: float = 1e-8) -> Tuple[np.ndarray, np.ndarray]:
    """
    One RMSProp update.

    acc <- rho * acc + (1 - rho) * grad^2;  param <- param - lr * grad / sqrt(acc + eps)
    """
    if param.shape != grad.shape or param.shape != acc.shape:
        raise ShapeMismatch(f"rmsprop shapes {param.shape}, {grad.shape}, {acc.shape}")
    acc = rho * acc + (1.0 - rho) * grad * grad
    param = param - lr * grad / np.sqrt(acc + eps)
    return param.astype(grad.dtype, copy=False), acc.astype(grad.dtype, copy=False)


class RMSProp:
    """RMSProp over a ParamSet with global-norm gradient clipping."""

    def __init__(self, params: ParamSet, lr: float, rho: float = 0.95, eps: float = 1e-8,
                 clip_norm: Optional[float] = 5.0):
        self.params = params
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.clip_norm = clip_norm
        self.acc: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> float:
        """Apply the accumulated gradients; returns the pre-clipping global norm."""
        grads = self.params.grads()
        norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
        if not np.isfinite(norm):
            raise NonFinite("gradient norm is not finite")
        scale = 1.0
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for name, param in self.params.items():
            g = grads[name] * scale if scale != 1.0 else grads[name]
            param.data, self.acc[name] = rmsprop_step(param.data, g.astype(param.data.dtype), self.acc[name],
                                                      self.lr, self.rho, self.eps)
        self.params.zero_grad()
        return norm

    def state(self) -> Dict[str, np.ndarray]:
        return {f"rmsprop/{name}": acc for name, acc in self.acc.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name in self.acc:
            key = f"rmsprop/{name}"
            if key in state:
                if state[key].shape != self.acc[name].shape:
                    raise CorruptCheckpoint("optimizer state shape mismatch", tensor_name=key)
                self.acc[name] = state[key].astype(self.params.dtype, copy=True)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def tape_gradients(f: Callable[[Tape], Tensor], params: ParamSet, seed: int = 0) -> Dict[str, np.ndarray]:
    """Analytic gradients of a scalar function of the parameters."""
    params.zero_grad()
    tape = Tape(train=False, seed=seed, dtype=params.dtype)
    loss = f(tape)
    tape.backward(loss)
    grads = {name: g.copy() for name, g in params.grads().items()}
    params.zero_grad()
    return grads


def grad_check(f: Callable[[Tape], Tensor], params: ParamSet, h: float = 1e-5,
               analytic: Optional[Dict[str, np.ndarray]] = None, max_per_param: Optional[int] = None,
               seed: int = 0) -> float:
    """
    Compare tape gradients with central differences (f(θ+h) - f(θ-h)) / 2h.

    Args:
        f: Builds a scalar loss on the given tape
        params: Parameters to perturb (use float64 for meaningful results)
        h: Finite-difference step
        analytic: Precomputed gradients to test instead of the tape's
        max_per_param: Check at most this many randomly chosen entries per parameter
        seed: Seed for entry sampling and the tape

    Returns:
        Maximum relative error |a - n| / max(|a| + |n|, 1e-6) over the checked entries
    """
    if analytic is None:
        analytic = tape_gradients(f, params, seed)
    rng = np.random.default_rng(seed)

    def value() -> float:
        out = f(Tape(train=False, seed=seed, record=False, dtype=params.dtype))
        result = float(np.asarray(out.data).sum())
        if not np.isfinite(result):
            raise NonFinite("function value is not finite")
        return result

    worst = 0.0
    for name, param in params.items():
        flat = param.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            entries = rng.choice(flat.size, size=max_per_param, replace=False)
        grad = analytic[name].reshape(-1)
        for idx in entries:
            original = flat[idx]
            flat[idx] = original + h
            plus = value()
            flat[idx] = original - h
            minus = value()
            flat[idx] = original
            numeric = (plus - minus) / (2 * h)
            error = abs(grad[idx] - numeric) / max(abs(grad[idx]) + abs(numeric), 1e-6)
            worst = max(worst, float(error))
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, tensors: Dict[str, np.ndarray], header: Optional[Dict] = None) -> None:
    """
    Write a checkpoint: human-readable JSON manifest, then raw float32 little-endian payloads.

    The file is written to a temporary name and renamed into place.
    """
    manifest = []
    payload = io.BytesIO()
    for name, array in tensors.items():
        raw = np.ascontiguousarray(array, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(array.shape), "offset": payload.tell(), "nbytes": len(raw)})
        payload.write(raw)

    document = dict(header or {})
    document["tensors"] = manifest
    document["payload_bytes"] = payload.tell()
    text = json.dumps(document, indent=1, sort_keys=True).encode("utf-8")

    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(f"{len(text)}\n".encode("ascii"))
        fh.write(text)
        fh.write(b"\n")
        fh.write(payload.getvalue())
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint {path} ({len(manifest)} tensors, {document['payload_bytes']} bytes)")


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict]:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        (tensors by name, header without the tensor manifest)
    """
    with open(path, "rb") as fh:
        blob = fh.read()

    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CorruptCheckpoint(f"{path} is not a checkpoint")
    rest = blob[len(CHECKPOINT_MAGIC):]
    line_end = rest.find(b"\n")
    try:
        header_len = int(rest[:line_end])
        header_text = rest[line_end + 1:line_end + 1 + header_len]
        header = json.loads(header_text.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise CorruptCheckpoint(f"unreadable manifest in {path}: {e}") from e

    payload = rest[line_end + 1 + header_len + 1:]
    if len(payload) != header.get("payload_bytes"):
        raise CorruptCheckpoint(
            f"payload has {len(payload)} bytes, manifest expects {header.get('payload_bytes')}"
        )

    tensors: Dict[str, np.ndarray] = {}
    for entry in header.pop("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if entry["nbytes"] != 4 * count or entry["offset"] + entry["nbytes"] > len(payload):
            raise CorruptCheckpoint("manifest entry does not fit the payload", tensor_name=entry["name"])
        array = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = array.reshape(shape).astype(np.float32)
    return tensors, header


if __name__ == "__main__":
    params = ParamSet(seed=1, dtype=np.float64)
    add_lstm(params, "demo", 3, 2)
    x = np.random.default_rng(0).normal(size=(1, 3))

    def loss_fn(tape: Tape) -> Tensor:
        h, c = lstm_step(tape, (tape.zeros((1, 2)), tape.zeros((1, 2))), tape.const(x), params, "demo")
        return tape.sum(tape.mul(h, h))

    print(f"LSTM step max relative error: {grad_check(loss_fn, params):.2e}")
