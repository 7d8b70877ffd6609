"""Tape-based reverse-mode automatic differentiation over float64 arrays.

A :class:`Graph` is an append-only list of nodes. Every node stores the op
kind, the ids of its inputs and its cached output. ``backward`` walks the tape
in reverse and accumulates vector-Jacobian products, so gradients are
available for parameter leaves and for input leaves alike.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class ShapeError(ValueError):
    """Raised when input shapes do not conform to an op."""


class DomainError(ValueError):
    """Raised when an op is evaluated outside its domain (e.g. log of 0)."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def as_tensor(x: Any) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    requires_grad: bool = True


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out the axes that numpy broadcasting expanded
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _softmax(a: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(a: np.ndarray, axis: int) -> np.ndarray:
    shifted = a - a.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _softplus(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


def _broadcast_shape(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"shapes {shapes} are not broadcastable") from exc


def _expand_reduced(grad, shape, axis):
    if axis is None:
        return np.broadcast_to(grad, shape)
    return np.broadcast_to(np.expand_dims(grad, axis), shape)


# ---------------------------------------------------------------------------
# forward rules: (input values, attrs) -> output value
# ---------------------------------------------------------------------------


def _fw_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.shape} and {b.shape}")
    return a @ b


def _fw_binary(fn):
    def rule(vals, attrs):
        a, b = vals
        _broadcast_shape(a.shape, b.shape)
        return fn(a, b)

    return rule


def _fw_log(vals, attrs):
    (a,) = vals
    if np.any(a <= 0):
        raise DomainError("log of a nonpositive value")
    return np.log(a)


def _fw_concat(vals, attrs):
    axis = attrs["axis"]
    ref = vals[0].shape
    for v in vals[1:]:
        if v.ndim != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(ref, v.shape)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat of {ref} and {v.shape} along axis {axis}")
    return np.concatenate(vals, axis=axis)


def _fw_reshape(vals, attrs):
    (a,) = vals
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    return a.reshape(shape)


def _fw_outer(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"batched outer of {a.shape} and {b.shape}")
    return (a[:, :, None] * b[:, None, :]).reshape(a.shape[0], -1)


_FORWARD: dict[str, Callable] = {
    "matmul": _fw_matmul,
    "add": _fw_binary(np.add),
    "sub": _fw_binary(np.subtract),
    "mul": _fw_binary(np.multiply),
    "scale": lambda v, at: v[0] * at["c"],
    "relu": lambda v, at: np.maximum(v[0], 0.0),
    "tanh": lambda v, at: np.tanh(v[0]),
    "exp": lambda v, at: np.exp(v[0]),
    "log": _fw_log,
    "sigmoid": lambda v, at: _sigmoid(v[0]),
    "softplus": lambda v, at: _softplus(v[0]),
    "softmax": lambda v, at: _softmax(v[0], at["axis"]),
    "log_softmax": lambda v, at: _log_softmax(v[0], at["axis"]),
    "sum": lambda v, at: np.sum(v[0], axis=at["axis"]),
    "mean": lambda v, at: np.mean(v[0], axis=at["axis"]),
    "square": lambda v, at: v[0] * v[0],
    "concat": _fw_concat,
    "slice": lambda v, at: v[0][at["index"]].copy(),
    "reshape": _fw_reshape,
    "outer": _fw_outer,
    "stop_gradient": lambda v, at: v[0].copy(),
    "grad_reversal": lambda v, at: v[0].copy(),
}


# ---------------------------------------------------------------------------
# backward rules: (upstream grad, node, input values) -> grads per input
# ---------------------------------------------------------------------------


def _bw_matmul(g, node, vals):
    a, b = vals
    return g @ b.T, a.T @ g


def _bw_add(g, node, vals):
    return _unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)


def _bw_sub(g, node, vals):
    return _unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)


def _bw_mul(g, node, vals):
    a, b = vals
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _bw_softmax(g, node, vals):
    s = node.value
    axis = node.attrs["axis"]
    return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


def _bw_log_softmax(g, node, vals):
    axis = node.attrs["axis"]
    s = np.exp(node.value)
    return (g - s * g.sum(axis=axis, keepdims=True),)


def _bw_concat(g, node, vals):
    axis = node.attrs["axis"]
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _bw_slice(g, node, vals):
    out = np.zeros_like(vals[0])
    out[node.attrs["index"]] = g
    return (out,)


def _bw_outer(g, node, vals):
    a, b = vals
    g3 = g.reshape(a.shape[0], a.shape[1], b.shape[1])
    return np.einsum("bij,bj->bi", g3, b), np.einsum("bij,bi->bj", g3, a)


_BACKWARD: dict[str, Callable] = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "scale": lambda g, n, v: (g * n.attrs["c"],),
    "relu": lambda g, n, v: (g * (v[0] > 0),),
    "tanh": lambda g, n, v: (g * (1.0 - n.value * n.value),),
    "exp": lambda g, n, v: (g * n.value,),
    "log": lambda g, n, v: (g / v[0],),
    "sigmoid": lambda g, n, v: (g * n.value * (1.0 - n.value),),
    "softplus": lambda g, n, v: (g * _sigmoid(v[0]),),
    "softmax": _bw_softmax,
    "log_softmax": _bw_log_softmax,
    "sum": lambda g, n, v: (_expand_reduced(g, v[0].shape, n.attrs["axis"]).copy(),),
    "mean": lambda g, n, v: (
        _expand_reduced(g, v[0].shape, n.attrs["axis"]) * (n.value.size / v[0].size),
    ),
    "square": lambda g, n, v: (2.0 * v[0] * g,),
    "concat": _bw_concat,
    "slice": _bw_slice,
    "reshape": lambda g, n, v: (g.reshape(v[0].shape),),
    "outer": _bw_outer,
    "grad_reversal": lambda g, n, v: (g * -n.attrs["lam"],),
}

OP_KINDS = frozenset(_FORWARD)


class Gradients:
    """Per-node gradients produced by :meth:`Graph.backward`.

    Nodes that the root does not depend on get a zero array of the node's
    output shape.
    """

    def __init__(self, graph: "Graph", grads: list):
        self._graph = graph
        self._grads = grads

    def __getitem__(self, nid: int) -> np.ndarray:
        g = self._grads[nid]
        if g is None:
            return np.zeros_like(self._graph.nodes[nid].value)
        return g

    def __len__(self) -> int:
        return len(self._grads)


class Graph:
    """Append-only tape of operations.

    Not thread-safe; build one graph per evaluation.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad: bool = True) -> int:
        """Add a parameter or data leaf and return its node id."""
        self.nodes.append(Node("leaf", (), as_tensor(value), requires_grad=requires_grad))
        return len(self.nodes) - 1

    def constant(self, value) -> int:
        return self.leaf(value, requires_grad=False)

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def primitive(self, op: str, *inputs: int, **attrs) -> int:
        """Evaluate ``op`` on the given node ids and append the result."""
        if op not in _FORWARD:
            raise ValueError(f"unknown op kind {op!r}")
        n = len(self.nodes)
        for i in inputs:
            if not 0 <= i < n:
                raise IndexError(f"node id {i} does not exist")
        vals = [self.nodes[i].value for i in inputs]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = np.asarray(_FORWARD[op](vals, attrs), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{op} produced a non-finite value")
        needs = op != "stop_gradient" and any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(op, tuple(inputs), out, attrs, needs))
        return n

    # convenience wrappers -------------------------------------------------

    def matmul(self, a, b):
        return self.primitive("matmul", a, b)

    def add(self, a, b):
        return self.primitive("add", a, b)

    def sub(self, a, b):
        return self.primitive("sub", a, b)

    def mul(self, a, b):
        return self.primitive("mul", a, b)

    def scale(self, a, c: float):
        return self.primitive("scale", a, c=float(c))

    def relu(self, a):
        return self.primitive("relu", a)

    def tanh(self, a):
        return self.primitive("tanh", a)

    def exp(self, a):
        return self.primitive("exp", a)

    def log(self, a):
        return self.primitive("log", a)

    def sigmoid(self, a):
        return self.primitive("sigmoid", a)

    def softplus(self, a):
        return self.primitive("softplus", a)

    def softmax(self, a, axis: int = -1):
        return self.primitive("softmax", a, axis=axis)

    def log_softmax(self, a, axis: int = -1):
        return self.primitive("log_softmax", a, axis=axis)

    def sum(self, a, axis=None):
        return self.primitive("sum", a, axis=axis)

    def mean(self, a, axis=None):
        return self.primitive("mean", a, axis=axis)

    def square(self, a):
        return self.primitive("square", a)

    def concat(self, ids, axis: int = -1):
        return self.primitive("concat", *ids, axis=axis)

    def slice(self, a, index):
        return self.primitive("slice", a, index=index)

    def reshape(self, a, shape):
        return self.primitive("reshape", a, shape=tuple(shape))

    def outer(self, a, b):
        return self.primitive("outer", a, b)

    def stop_gradient(self, a):
        return self.primitive("stop_gradient", a)

    def grad_reversal(self, a, lam: float = 1.0):
        return self.primitive("grad_reversal", a, lam=float(lam))

    # ---------------------------------------------------------------------

    def backward(self, root: int) -> Gradients:
        """Reverse sweep from a scalar ``root``."""
        root_val = self.nodes[root].value
        if root_val.ndim != 0:
            raise ShapeError(f"backward root must be a scalar, got shape {root_val.shape}")
        grads: list = [None] * len(self.nodes)
        grads[root] = np.ones_like(root_val)
        for nid in range(root, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or not node.inputs or not node.requires_grad:
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            for i, gi in zip(node.inputs, _BACKWARD[node.op](g, node, vals)):
                if not self.nodes[i].requires_grad:
                    continue
                gi = np.asarray(gi, dtype=np.float64)
                if grads[i] is None:
                    grads[i] = gi.copy()
                else:
                    grads[i] = grads[i] + gi
        return Gradients(self, grads)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    max_abs_error: float
    max_rel_error: float
    per_param: dict[str, dict[str, float]]

    def table(self) -> str:
        lines = [f"{'param':<24}{'abs_err':>14}{'rel_err':>14}"]
        for name, row in self.per_param.items():
            lines.append(f"{name:<24}{row['abs']:>14.3e}{row['rel']:>14.3e}")
        return "\n".join(lines)


LossBuilder = Callable[[Graph, dict[str, int]], int]


def evaluate_loss(loss_builder: LossBuilder, params: dict[str, np.ndarray]) -> float:
    graph = Graph()
    ids = {k: graph.leaf(v) for k, v in params.items()}
    return float(graph.value(loss_builder(graph, ids)))


def analytic_gradients(loss_builder: LossBuilder, params: dict[str, np.ndarray]):
    graph = Graph()
    ids = {k: graph.leaf(v) for k, v in params.items()}
    root = loss_builder(graph, ids)
    grads = graph.backward(root)
    return {k: grads[i] for k, i in ids.items()}


def grad_check(loss_builder: LossBuilder, params: dict[str, np.ndarray], step: float = 1e-5) -> GradReport:
    """Compare engine gradients with central finite differences.

    The relative error of a parameter tensor is the largest absolute
    discrepancy divided by the largest gradient magnitude of that tensor
    (analytic or numeric); a tensor whose gradients are both identically
    zero has relative error 0.
    """
    params = {k: as_tensor(v) for k, v in params.items()}
    analytic = analytic_gradients(loss_builder, params)
    per_param = {}
    for name, value in params.items():
        numeric = np.zeros_like(value)
        flat = numeric.reshape(-1)
        for idx in range(value.size):
            probe = dict(params)
            plus = value.copy().reshape(-1)
            minus = value.copy().reshape(-1)
            plus[idx] += step
            minus[idx] -= step
            probe[name] = plus.reshape(value.shape)
            f_plus = evaluate_loss(loss_builder, probe)
            probe[name] = minus.reshape(value.shape)
            f_minus = evaluate_loss(loss_builder, probe)
            flat[idx] = (f_plus - f_minus) / (2.0 * step)
        diff = np.abs(analytic[name] - numeric)
        abs_err = float(diff.max()) if diff.size else 0.0
        scale = max(float(np.abs(analytic[name]).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
        rel_err = abs_err / scale if scale > 0 else 0.0
        per_param[name] = {"abs": abs_err, "rel": rel_err}
    return GradReport(
        max_abs_error=max((r["abs"] for r in per_param.values()), default=0.0),
        max_rel_error=max((r["rel"] for r in per_param.values()), default=0.0),
        per_param=per_param,
    )
