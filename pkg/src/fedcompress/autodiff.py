"""Tape-based reverse-mode differentiation over 2-D float64 arrays.

A :class:`Tape` records primitive ops as they execute (define-by-run). Each op
kind registers a forward rule and a vector-Jacobian rule in ``OPS``; calling
:meth:`Tape.backward` walks the nodes in reverse and accumulates gradients.

>>> tape = Tape()
>>> a = tape.leaf(np.ones((2, 2)), name="a")
>>> loss = tape.record("sum", [tape.record("add", [a, a])])
>>> tape.backward(loss)["a"]
array([[2., 2.],
       [2., 2.]])
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .linalg import Matrix, RngStream, ShapeError


@dataclass
class Param:
    name: str
    value: Matrix
    trainable: bool = True
    grad: Matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64, ndmin=2)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def copy(self) -> "Param":
        return Param(self.name, self.value.copy(), self.trainable)


class Node:
    __slots__ = ("kind", "inputs", "attrs", "value", "grad", "name", "index")

    def __init__(self, kind, inputs, attrs, value, name=None, index=0):
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.grad = None
        self.name = name
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.kind}, shape={self.value.shape}, name={self.name})"


# -- primitive rules ---------------------------------------------------------

_GELU_K = math.sqrt(2.0 / math.pi)


def _check_add(a, b):
    if a.shape != b.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
        raise ShapeError(f"add: cannot broadcast {b.shape} onto {a.shape}")


def _add_fwd(vals, attrs):
    _check_add(*vals)
    return vals[0] + vals[1]


def _add_bwd(g, vals, out, attrs):
    a, b = vals
    gb = g if b.shape == a.shape else g.sum(axis=0, keepdims=True)
    return [g, gb]


def _matmul_fwd(vals, attrs):
    a, b = vals
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def _matmul_bwd(g, vals, out, attrs):
    a, b = vals
    return [g @ b.T, a.T @ g]


def _linear_fwd(vals, attrs):
    x, w = vals
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    return x @ w.T


def _linear_bwd(g, vals, out, attrs):
    x, w = vals
    return [g @ w, g.T @ x]


def _gelu_fwd(vals, attrs):
    x = vals[0]
    return 0.5 * x * (1.0 + np.tanh(_GELU_K * (x + 0.044715 * x**3)))


def _gelu_bwd(g, vals, out, attrs):
    x = vals[0]
    t = np.tanh(_GELU_K * (x + 0.044715 * x**3))
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)
    return [g * d]


def _softmax_fwd(vals, attrs):
    x = vals[0]
    mask = attrs.get("mask")
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _softmax_bwd(g, vals, out, attrs):
    return [out * (g - np.sum(g * out, axis=1, keepdims=True))]


def _xent_fwd(vals, attrs):
    logits = vals[0]
    targets = attrs["targets"]
    if targets.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_xent: {targets.shape} targets for {logits.shape} logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(len(targets)), targets]
    return np.array([[nll.mean()]])


def _xent_bwd(g, vals, out, attrs):
    logits = vals[0]
    targets = attrs["targets"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(targets)), targets] -= 1.0
    return [g[0, 0] * p / len(targets)]


def _take_rows_bwd(g, vals, out, attrs):
    gt = np.zeros_like(vals[0])
    np.add.at(gt, attrs["ids"], g)
    return [gt]


def _slice_cols_bwd(g, vals, out, attrs):
    gx = np.zeros_like(vals[0])
    gx[:, attrs["start"]:attrs["stop"]] = g
    return [gx]


def _concat_cols_bwd(g, vals, out, attrs):
    edges = np.cumsum([v.shape[1] for v in vals])[:-1]
    return np.split(g, edges, axis=1)


@dataclass(frozen=True)
class OpRule:
    forward: Callable
    backward: Callable


OPS: dict[str, OpRule] = {
    "add": OpRule(_add_fwd, _add_bwd),
    "mul": OpRule(lambda v, a: v[0] * v[1], lambda g, v, o, a: [g * v[1], g * v[0]]),
    "scale": OpRule(lambda v, a: v[0] * a["factor"], lambda g, v, o, a: [g * a["factor"]]),
    "matmul": OpRule(_matmul_fwd, _matmul_bwd),
    "linear": OpRule(_linear_fwd, _linear_bwd),
    "transpose": OpRule(lambda v, a: v[0].T.copy(), lambda g, v, o, a: [g.T]),
    "gelu": OpRule(_gelu_fwd, _gelu_bwd),
    "softmax": OpRule(_softmax_fwd, _softmax_bwd),
    "softmax_xent": OpRule(_xent_fwd, _xent_bwd),
    "sum": OpRule(lambda v, a: np.array([[v[0].sum()]]), lambda g, v, o, a: [np.full_like(v[0], g[0, 0])]),
    "take_rows": OpRule(lambda v, a: v[0][a["ids"]], _take_rows_bwd),
    "slice_cols": OpRule(lambda v, a: v[0][:, a["start"]:a["stop"]].copy(), _slice_cols_bwd),
    "concat_cols": OpRule(lambda v, a: np.concatenate(v, axis=1), _concat_cols_bwd),
}


class Tape:
    """Ordered record of executed ops. One tape serves exactly one backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def _append(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str | None = None) -> Node:
        value = np.array(value, dtype=np.float64, ndmin=2)
        return self._append(Node("leaf", (), {}, value, name=name))

    def param(self, p: Param) -> Node:
        return self.leaf(p.value, name=p.name)

    def record(self, kind: str, inputs, **attrs) -> Node:
        if kind not in OPS:
            raise KeyError(f"unknown op kind {kind!r}")
        for x in inputs:
            if not isinstance(x, Node) or x.index >= len(self.nodes) or x is not self.nodes[x.index]:
                raise ValueError(f"{kind}: inputs must be nodes recorded on this tape")
        value = OPS[kind].forward([x.value for x in inputs], attrs)
        return self._append(Node(kind, tuple(inputs), attrs, value))

    # convenience wrappers for the common ops
    def add(self, a, b):
        return self.record("add", [a, b])

    def matmul(self, a, b):
        return self.record("matmul", [a, b])

    def linear(self, x, w):
        return self.record("linear", [x, w])

    def scale(self, a, factor: float):
        return self.record("scale", [a], factor=float(factor))

    def backward(self, loss: Node) -> dict[str, Matrix]:
        """Gradients of the scalar ``loss`` for every named leaf on the tape."""
        if loss.value.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar loss node, got shape {loss.value.shape}")
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        self._consumed = True
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes[: loss.index + 1]):
            if node.grad is None or not node.inputs:
                continue
            grads = OPS[node.kind].backward(node.grad, [x.value for x in node.inputs], node.value, node.attrs)
            for x, gx in zip(node.inputs, grads):
                x.grad = gx if x.grad is None else x.grad + gx
        return {
            n.name: (n.grad if n.grad is not None else np.zeros_like(n.value))
            for n in self.nodes
            if n.kind == "leaf" and n.name is not None
        }


def backward(tape: Tape, loss: Node) -> dict[str, Matrix]:
    return tape.backward(loss)


def grad_check(model, batch, eps: float = 1e-6, samples: int = 20,
               stream: RngStream | None = None) -> float:
    """Worst normwise relative error between tape gradients and central differences.

    ``model`` must expose ``params`` (name -> :class:`Param`),
    ``trainable_names()``, ``loss(batch)`` and ``loss_and_grads(batch)``. For
    each trainable parameter up to ``samples`` random entries are probed and
    the error is ``max|a - n| / max(max|a|, max|n|)`` over those entries.
    """
    stream = stream or RngStream(0)
    _, grads = model.loss_and_grads(batch)
    worst = 0.0
    for name in model.trainable_names():
        flat = model.params[name].value.reshape(-1)
        rng = stream.spawn("grad_check", name).generator()
        picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        analytic = grads[name].reshape(-1)[picks]
        numeric = np.empty(len(picks))
        for j, idx in enumerate(picks):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = model.loss(batch)
            flat[idx] = orig - eps
            down = model.loss(batch)
            flat[idx] = orig
            numeric[j] = (up - down) / (2 * eps)
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), np.finfo(np.float64).tiny)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst
