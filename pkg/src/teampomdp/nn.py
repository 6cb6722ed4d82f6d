"""Minimal differentiable-network layer: dense and tanh-recurrent cells,
softmax heads, the smooth-L1 and negative-log-likelihood losses, a named
parameter store, and exact reverse-mode gradients.

Tensors wrap row-major float64 arrays and record the operations applied to
them; backward() replays the tape in reverse.  Gradients are verified against
central finite differences in the test suite.
"""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np

__all__ = [
    "GraphError",
    "Tensor",
    "ParamStore",
    "DenseLayer",
    "RecurrentCell",
    "SoftmaxHead",
    "forward_dense",
    "forward_rnn_step",
    "forward_softmax",
    "loss_smooth_l1",
    "loss_nll",
    "backward",
    "concat",
    "stack_rows",
]


class GraphError(RuntimeError):
    """Backward called on a detached or non-scalar node."""


class Tensor:
    """Array node in the computation graph."""

    __slots__ = ("data", "grad", "_parents", "_backward", "name")

    def __init__(self, data, parents=(), backward=None, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    # -- graph ops ----------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out_data = self.data + other.data

        def bwd(g, a=self, b=other):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))

        return Tensor(out_data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out_data = self.data * other.data

        def bwd(g, a=self, b=other):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

        return Tensor(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def matmul(self, other):
        other = _as_tensor(other)
        out_data = self.data @ other.data

        def bwd(g, a=self, b=other):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

        return Tensor(out_data, (self, other), bwd)

    __matmul__ = matmul

    def tanh(self):
        out_data = np.tanh(self.data)

        def bwd(g, a=self, y=out_data):
            _accum(a, g * (1.0 - y * y))

        return Tensor(out_data, (self,), bwd)

    def log(self):
        out_data = np.log(self.data)

        def bwd(g, a=self):
            _accum(a, g / a.data)

        return Tensor(out_data, (self,), bwd)

    def softmax(self):
        """Row-wise softmax over the last axis, stabilized by max subtraction."""
        z = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)

        def bwd(g, a=self, y=y):
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(a, y * (g - dot))

        return Tensor(y, (self,), bwd)

    def gather(self, indices):
        """Pick one column per row: out[i] = self[i, indices[i]]."""
        idx = np.asarray(indices, dtype=int)
        rows = np.arange(self.data.shape[0])
        out_data = self.data[rows, idx]

        def bwd(g, a=self, rows=rows, idx=idx):
            buf = np.zeros_like(a.data)
            np.add.at(buf, (rows, idx), g)
            _accum(a, buf)

        return Tensor(out_data, (self,), bwd)

    def narrow(self, start: int, width: int):
        """Columns [start, start+width) of a 2-D tensor."""
        out_data = self.data[:, start:start + width]

        def bwd(g, a=self, start=start, width=width):
            buf = np.zeros_like(a.data)
            buf[:, start:start + width] = g
            _accum(a, buf)

        return Tensor(out_data, (self,), bwd)

    def sum(self):
        out_data = np.asarray(self.data.sum())

        def bwd(g, a=self):
            _accum(a, np.ones_like(a.data) * g)

        return Tensor(out_data, (self,), bwd)

    def mean(self):
        n = self.data.size
        out_data = np.asarray(self.data.mean())

        def bwd(g, a=self, n=n):
            _accum(a, np.ones_like(a.data) * (g / n))

        return Tensor(out_data, (self,), bwd)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- backward -------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise GraphError("backward requires a scalar loss")
        if not self._parents:
            raise GraphError("backward on a detached graph")
        order = []
        seen = set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            order.append(node)

        visit(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accum(node: Tensor, g):
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad = node.grad + g


def _unbroadcast(g, shape):
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=1)
    widths = [d.shape[1] for d in datas]

    def bwd(g, tensors=tuple(tensors), widths=tuple(widths)):
        start = 0
        for t, w in zip(tensors, widths):
            _accum(t, g[:, start:start + w])
            start += w

    return Tensor(out_data, tuple(tensors), bwd)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack scalar or (k,) tensors into one vector tensor."""
    out_data = np.array([t.data.reshape(-1) for t in tensors]).reshape(-1)

    def bwd(g, tensors=tuple(tensors)):
        g = g.reshape(len(tensors), -1)
        for t, gi in zip(tensors, g):
            _accum(t, gi.reshape(t.data.shape))

    return Tensor(out_data, tuple(tensors), bwd)


class ParamStore:
    """Named parameter tensors with gradient accumulators and SGD updates."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), name=name)
        self.params[name] = t
        return t

    def gradients(self) -> dict:
        return {k: (None if p.grad is None else np.array(p.grad)) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def sgd_step(self, lr: float, names: Sequence[str] | None = None):
        for k, p in self.params.items():
            if names is not None and k not in names:
                continue
            if p.grad is not None:
                if not np.all(np.isfinite(p.grad)):
                    raise FloatingPointError(f"non-finite gradient in {k}")
                p.data = p.data - lr * p.grad

    def check_finite(self):
        for k, p in self.params.items():
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError(f"non-finite parameter {k}")

    # checkpoints: flat (name, shape, data) records, bit-exact round trip
    def save(self, path: str):
        records = [
            {"name": k, "shape": list(p.data.shape), "data": p.data.reshape(-1).tolist()}
            for k, p in sorted(self.params.items())
        ]
        with open(path, "w") as f:
            json.dump({"params": records}, f)

    def load(self, path: str):
        with open(path) as f:
            payload = json.load(f)
        for rec in payload["params"]:
            data = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
            if rec["name"] in self.params:
                self.params[rec["name"]].data = data
            else:
                self.add(rec["name"], data)


def _init_matrix(rng: np.random.Generator, fan_in: int, fan_out: int):
    r = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-r, r, size=(fan_in, fan_out))


class DenseLayer:
    """Affine map x @ W + b."""

    def __init__(self, store: ParamStore, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator):
        self.W = store.add(f"{name}.W", _init_matrix(rng, fan_in, fan_out))
        self.b = store.add(f"{name}.b", np.zeros(fan_out))
        self.param_names = (f"{name}.W", f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b


class RecurrentCell:
    """Single-layer tanh cell: h' = tanh(x @ Wx + h @ Wh + b)."""

    def __init__(self, store: ParamStore, name: str, input_size: int, hidden_size: int,
                 rng: np.random.Generator):
        self.Wx = store.add(f"{name}.Wx", _init_matrix(rng, input_size, hidden_size))
        self.Wh = store.add(f"{name}.Wh", _init_matrix(rng, hidden_size, hidden_size))
        self.b = store.add(f"{name}.b", np.zeros(hidden_size))
        self.hidden_size = hidden_size
        self.param_names = (f"{name}.Wx", f"{name}.Wh", f"{name}.b")

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return (x @ self.Wx + h @ self.Wh + self.b).tanh()

    def initial_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.hidden_size)))


class SoftmaxHead:
    """Affine map followed by a row-wise softmax."""

    def __init__(self, store: ParamStore, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator):
        self.dense = DenseLayer(store, name, fan_in, fan_out, rng)
        self.param_names = self.dense.param_names

    def __call__(self, x: Tensor) -> Tensor:
        return self.dense(x).softmax()


def forward_dense(layer: DenseLayer, x: Tensor) -> Tensor:
    return layer(x)


def forward_rnn_step(cell: RecurrentCell, x: Tensor, h: Tensor) -> Tensor:
    return cell(x, h)


def forward_softmax(head: SoftmaxHead, x: Tensor) -> Tensor:
    return head(x)


def loss_smooth_l1(prediction: Tensor, target) -> Tensor:
    """Elementwise smooth-L1: 0.5*e^2 when |e| < 1, |e| - 0.5 otherwise."""
    target = np.asarray(target, dtype=np.float64)
    e = prediction.data - target
    abse = np.abs(e)
    out_data = np.where(abse < 1.0, 0.5 * e * e, abse - 0.5)

    def bwd(g, a=prediction, e=e):
        _accum(a, g * np.clip(e, -1.0, 1.0))

    return Tensor(out_data, (prediction,), bwd)


def loss_nll(observation_index, probs: Tensor, eta: float) -> Tensor:
    """-log(P(observed) + eta); eta > 0 keeps the gradient finite at P = 0."""
    if eta <= 0.0:
        raise ValueError("eta must be positive")
    if probs.data.ndim == 1:
        picked_data = probs.data[int(observation_index)]

        def bwd(g, a=probs, i=int(observation_index), p=picked_data):
            buf = np.zeros_like(a.data)
            buf[i] = -g / (p + eta)
            _accum(a, buf)

        return Tensor(-np.log(picked_data + eta), (probs,), bwd)
    picked = probs.gather(observation_index)
    shifted = picked + eta
    return -shifted.log()


def backward(loss: Tensor):
    """Reverse-mode sweep; gradients land on every reachable parameter."""
    loss.backward()
