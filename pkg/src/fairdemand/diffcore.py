"""Small define-then-run reverse-mode differentiation engine.

A :class:`Graph` records operations on :class:`Var` handles.  Leaves are
either named inputs (bound at evaluation time) or constants.  Values are
float64 numpy arrays; there is no separate tensor class.

Example::

    g = Graph()
    x = g.input("x", shape=())
    g.set_output(x * x)
    g.evaluate({"x": 3.0})                  # 9.0
    g.gradients({"x": 3.0}, wrt=["x"])      # {"x": array(6.0)}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Var",
    "GraphError",
    "ShapeError",
    "NonFiniteError",
    "OP_KINDS",
    "finite_diff_oracle",
]

# add..transpose is the core set; the rest serve the neural models and
# multi-step feedback.
OP_KINDS = (
    "add", "sub", "mul", "div", "matmul", "abs", "sqrt", "mean", "sum",
    "broadcast", "transpose", "sigmoid", "tanh", "relu", "reshape", "index", "concat",
)


class GraphError(ValueError):
    """Invalid graph construction or evaluation request."""

    def __init__(self, message: str, node_id: int | None = None):
        self.node_id = node_id
        if node_id is not None:
            message = f"node {node_id}: {message}"
        super().__init__(message)


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError, ArithmeticError):
    pass


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)


class Var:
    """Handle to a node of a :class:`Graph`; supports arithmetic operators."""

    __slots__ = ("graph", "id")
    __array_priority__ = 1000  # so ndarray <op> Var defers to Var

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    def __repr__(self) -> str:
        return f"Var({self.id}, {self.graph.nodes[self.id].kind})"

    def __hash__(self) -> int:
        return hash((id(self.graph), self.id))

    def __eq__(self, other) -> bool:  # identity semantics, used as dict keys
        return isinstance(other, Var) and other.graph is self.graph and other.id == self.id

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.graph is not self.graph:
                raise GraphError("cannot mix nodes from different graphs")
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        return self.graph._op("add", self, self._lift(other))

    def __radd__(self, other):
        return self.graph._op("add", self._lift(other), self)

    def __sub__(self, other):
        return self.graph._op("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.graph._op("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.graph._op("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.graph._op("mul", self._lift(other), self)

    def __truediv__(self, other):
        return self.graph._op("div", self, self._lift(other))

    def __rtruediv__(self, other):
        return self.graph._op("div", self._lift(other), self)

    def __matmul__(self, other):
        return self.graph._op("matmul", self, self._lift(other))

    def __rmatmul__(self, other):
        return self.graph._op("matmul", self._lift(other), self)

    def __neg__(self):
        return self.graph._op("mul", self, self.graph.constant(-1.0))

    def __abs__(self):
        return self.graph._op("abs", self)

    def __getitem__(self, key):
        return self.graph._op("index", self, key=key)

    def sqrt(self, eps: float = 0.0) -> "Var":
        return self.graph._op("sqrt", self, eps=float(eps))

    def sum(self, axis=None, keepdims: bool = False) -> "Var":
        return self.graph._op("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Var":
        return self.graph._op("mean", self, axis=axis, keepdims=keepdims)

    def transpose(self, *axes) -> "Var":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return self.graph._op("transpose", self, axes=axes or None)

    @property
    def T(self) -> "Var":
        return self.transpose()

    def reshape(self, *shape) -> "Var":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.graph._op("reshape", self, shape=tuple(shape))

    def broadcast_to(self, shape) -> "Var":
        return self.graph._op("broadcast", self, shape=tuple(shape))

    def sigmoid(self) -> "Var":
        return self.graph._op("sigmoid", self)

    def tanh(self) -> "Var":
        return self.graph._op("tanh", self)

    def relu(self) -> "Var":
        return self.graph._op("relu", self)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g: np.ndarray, attrs: dict, in_shape: tuple[int, ...]) -> np.ndarray:
    if not attrs["keepdims"]:
        for a in sorted(_norm_axes(attrs["axis"], len(in_shape))):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, in_shape)


def _matmul_grads(a: np.ndarray, b: np.ndarray, g: np.ndarray, nd=(True, True)):
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    out_shape = np.broadcast_shapes(a2.shape[:-2], b2.shape[:-2]) + (a2.shape[-2], b2.shape[-1])
    g2 = g.reshape(out_shape)
    ga = gb = None
    if nd[0]:
        ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(a.shape)
    if nd[1]:
        if b2.ndim == 2 and a2.ndim > 2:
            # shared weight matrix: fold the batch axes into one GEMM
            gb = a2.reshape(-1, a2.shape[-1]).T @ g2.reshape(-1, g2.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape)
        gb = gb.reshape(b.shape)
    return ga, gb


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.tanh(0.5 * x)
    out += 1.0
    out *= 0.5
    return out


# forward: (input values, attrs) -> value
_FORWARD: dict[str, Callable[..., np.ndarray]] = {
    "add": lambda v, at: v[0] + v[1],
    "sub": lambda v, at: v[0] - v[1],
    "mul": lambda v, at: v[0] * v[1],
    "div": lambda v, at: v[0] / v[1],
    "matmul": lambda v, at: np.matmul(v[0], v[1]),
    "abs": lambda v, at: np.abs(v[0]),
    "sqrt": lambda v, at: np.sqrt(v[0] + at["eps"]),
    "sum": lambda v, at: np.sum(v[0], axis=at["axis"], keepdims=at["keepdims"]),
    "mean": lambda v, at: np.mean(v[0], axis=at["axis"], keepdims=at["keepdims"]),
    "broadcast": lambda v, at: np.broadcast_to(v[0], at["shape"]),
    "transpose": lambda v, at: np.transpose(v[0], at["axes"]),
    "sigmoid": lambda v, at: _sigmoid(v[0]),
    "tanh": lambda v, at: np.tanh(v[0]),
    "relu": lambda v, at: np.maximum(v[0], 0.0),
    "reshape": lambda v, at: np.reshape(v[0], at["shape"]),
    "index": lambda v, at: v[0][at["key"]],
    "concat": lambda v, at: np.concatenate(v, axis=at["axis"]),
}


def _bw_index(v, out, g, at, nd):
    grad = np.zeros_like(v[0])
    key = at["key"]
    parts = key if isinstance(key, tuple) else (key,)
    if all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts):
        grad[key] += g
    else:  # advanced indexing may repeat positions
        np.add.at(grad, key, g)
    return (grad,)


def _bw_concat(v, out, g, at, nd):
    sizes = np.cumsum([x.shape[at["axis"]] for x in v])[:-1]
    return tuple(np.split(g, sizes, axis=at["axis"]))


def _bw_mean(v, out, g, at, nd):
    shape = v[0].shape
    count = int(np.prod([shape[a] for a in _norm_axes(at["axis"], len(shape))]))
    return (_expand_reduced(g, at, shape) / count,)


# backward: (input values, output value, upstream grad, attrs) -> input grads
_BACKWARD: dict[str, Callable[..., tuple]] = {
    "add": lambda v, out, g, at, nd: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
    "sub": lambda v, out, g, at, nd: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)),
    "mul": lambda v, out, g, at, nd: (_unbroadcast(g * v[1], v[0].shape) if nd[0] else None,
                                      _unbroadcast(g * v[0], v[1].shape) if nd[1] else None),
    "div": lambda v, out, g, at, nd: (_unbroadcast(g / v[1], v[0].shape) if nd[0] else None,
                                      _unbroadcast(-g * out / v[1], v[1].shape) if nd[1] else None),
    "matmul": lambda v, out, g, at, nd: _matmul_grads(v[0], v[1], g, nd),
    "abs": lambda v, out, g, at, nd: (g * np.sign(v[0]),),
    "sqrt": lambda v, out, g, at, nd: (g * 0.5 / out,),
    "sum": lambda v, out, g, at, nd: (_expand_reduced(g, at, v[0].shape),),
    "mean": _bw_mean,
    "broadcast": lambda v, out, g, at, nd: (_unbroadcast(g, v[0].shape),),
    "transpose": lambda v, out, g, at, nd: (
        np.transpose(g, None if at["axes"] is None else np.argsort(at["axes"])),),
    "sigmoid": lambda v, out, g, at, nd: (g * out * (1.0 - out),),
    "tanh": lambda v, out, g, at, nd: (g * (1.0 - out * out),),
    "relu": lambda v, out, g, at, nd: (g * (v[0] > 0),),
    "reshape": lambda v, out, g, at, nd: (np.reshape(g, v[0].shape),),
    "index": _bw_index,
    "concat": _bw_concat,
}


def _check_finite(value: np.ndarray, node_id: int, kind: str) -> None:
    # one reduction first; fall back to the elementwise test only on suspicion
    if not np.isfinite(np.sum(value)) and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by '{kind}'", node_id)


class Graph:
    """Expression graph with named inputs, constants and one scalar output.

    Nodes are appended in construction order, so the node list is already
    topologically sorted.  Instances keep a forward cache and are therefore
    not safe to share between threads during evaluation.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.roots: dict[str, int] = {}
        self._declared: dict[int, tuple | None] = {}
        self._consts: dict[int, np.ndarray] = {}
        self.output: int | None = None
        self._values: list[np.ndarray] | None = None

    # -- construction -------------------------------------------------------
    def _add(self, kind: str, inputs: tuple[int, ...] = (), **attrs) -> Var:
        self.nodes.append(_Node(kind, inputs, attrs))
        return Var(self, len(self.nodes) - 1)

    def _op(self, kind: str, *args: Var, **attrs) -> Var:
        return self._add(kind, tuple(a.id for a in args), **attrs)

    def input(self, name: str, shape: Sequence[int | None] | None = None) -> Var:
        """Declare a bound input.  ``None`` entries in ``shape`` are wildcards."""
        if name in self.roots:
            raise GraphError(f"duplicate input name {name!r}")
        var = self._add("input", name=name)
        self.roots[name] = var.id
        self._declared[var.id] = None if shape is None else tuple(shape)
        return var

    def constant(self, value) -> Var:
        var = self._add("const")
        self._consts[var.id] = np.asarray(value, dtype=np.float64)
        return var

    def concat(self, parts: Sequence[Var], axis: int = -1) -> Var:
        return self._op("concat", *parts, axis=axis)

    def set_output(self, var: Var) -> None:
        if var.graph is not self:
            raise GraphError("output belongs to another graph")
        self.output = var.id

    # -- evaluation ---------------------------------------------------------
    def _root_id(self, key) -> int:
        if isinstance(key, Var):
            node_id = key.id
        elif isinstance(key, str):
            if key not in self.roots:
                raise GraphError(f"unknown input {key!r}")
            node_id = self.roots[key]
        else:
            node_id = int(key)
        if self.nodes[node_id].kind != "input":
            raise GraphError("not an input node", node_id)
        return node_id

    def _bind(self, bindings: Mapping[Any, Any]) -> dict[int, np.ndarray]:
        bound: dict[int, np.ndarray] = {}
        for key, value in bindings.items():
            node_id = self._root_id(key)
            arr = np.asarray(value, dtype=np.float64)
            declared = self._declared[node_id]
            if declared is not None and (
                len(declared) != arr.ndim
                or any(d is not None and d != s for d, s in zip(declared, arr.shape))
            ):
                raise ShapeError(f"bound shape {arr.shape} does not match declared {declared}", node_id)
            bound[node_id] = arr
        missing = [n for n, i in self.roots.items() if i not in bound]
        if missing:
            raise GraphError(f"unbound inputs: {missing}")
        return bound

    def forward(self, bindings: Mapping[Any, Any]) -> list[np.ndarray]:
        """Compute and cache every node value; returns the cache."""
        bound = self._bind(bindings)
        values: list[np.ndarray] = [None] * len(self.nodes)  # type: ignore[list-item]
        for i, node in enumerate(self.nodes):
            if node.kind == "input":
                values[i] = bound[i]
                continue
            if node.kind == "const":
                values[i] = self._consts[i]
                continue
            args = [values[j] for j in node.inputs]
            try:
                with np.errstate(all="ignore"):
                    out = _FORWARD[node.kind](args, node.attrs)
            except (ValueError, IndexError) as exc:
                shapes = [a.shape for a in args]
                raise ShapeError(f"'{node.kind}' rejected input shapes {shapes}: {exc}", i) from None
            out = np.asarray(out, dtype=np.float64)
            _check_finite(out, i, node.kind)
            values[i] = out
        self._values = values
        return values

    def evaluate(self, bindings: Mapping[Any, Any]) -> float:
        """Forward pass; returns the scalar output value."""
        if self.output is None:
            raise GraphError("graph has no output")
        values = self.forward(bindings)
        out = values[self.output]
        if out.size != 1:
            raise ShapeError(f"output is not scalar (shape {out.shape})", self.output)
        return float(out.reshape(()))

    def value(self, var: Var) -> np.ndarray:
        """Cached forward value of ``var`` from the last evaluation."""
        if self._values is None:
            raise GraphError("graph has not been evaluated")
        return self._values[var.id]

    def gradients(self, bindings: Mapping[Any, Any], wrt: Iterable[Any]) -> dict:
        """Gradients of the output with respect to the inputs in ``wrt``.

        The result is keyed the same way ``wrt`` was given (names, ids or
        :class:`Var`).
        """
        _, grads = self.value_and_gradients(bindings, wrt)
        return grads

    def value_and_gradients(self, bindings: Mapping[Any, Any], wrt: Iterable[Any]):
        wrt = list(wrt)
        targets = {self._root_id(k): k for k in wrt}
        loss = self.evaluate(bindings)
        values = self._values
        n = len(self.nodes)

        needs = [False] * n
        for i, node in enumerate(self.nodes):
            if i in targets:
                needs[i] = True
            elif node.inputs:
                needs[i] = any(needs[j] for j in node.inputs)

        grads: list[np.ndarray | None] = [None] * n
        grads[self.output] = np.ones_like(values[self.output])
        for i in range(self.output, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or not node.inputs or not needs[i]:
                continue
            args = [values[j] for j in node.inputs]
            nd = tuple(needs[j] for j in node.inputs)
            parts = _BACKWARD[node.kind](args, values[i], g, node.attrs, nd)
            for j, part in zip(node.inputs, parts):
                if not needs[j] or part is None:
                    continue
                grads[j] = part if grads[j] is None else grads[j] + part

        result = {}
        for node_id, key in targets.items():
            g = grads[node_id]
            shape = values[node_id].shape
            result[key] = np.zeros(shape) if g is None else np.array(g, dtype=np.float64).reshape(shape)
        return loss, result


def finite_diff_oracle(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    Independent of :class:`Graph`; used as the ground truth in gradient checks.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite at coordinate {k}")
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad
