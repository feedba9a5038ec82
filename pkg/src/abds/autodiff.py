"""Dense float64 tensors and a recorded-graph reverse-mode autodiff engine.

The engine is deliberately small: it supports exactly the primitives needed
to train an MLP noise predictor and to pull vector-Jacobian products through
it at inference time (add with row broadcast, scalar scale, 2-D matmul,
tanh, relu, sum-of-squares, last-axis concat).

A :class:`Graph` is built once for a given set of leaf shapes and is then
immutable; it can be evaluated repeatedly against different leaf bindings.
All arithmetic is 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    """Raised when a graph is constructed with incompatible shapes."""


class NonFiniteError(ValueError):
    """Raised when a tensor holds (or an evaluation produces) NaN or Inf."""


class Tensor:
    """Immutable dense array: row-major float64 values plus a shape.

    NaN and Inf are rejected at construction; ``validate`` re-checks the
    invariant (shape/size consistency and finiteness) on demand.
    """

    __slots__ = ("data", "shape")

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        elif arr.base is not None or arr is values:
            arr = arr.copy()
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "shape", arr.shape)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    def validate(self):
        """Check the tensor invariants, raising on violation."""
        if int(np.prod(self.shape)) != self.data.size:
            raise GraphError("shape does not match data length")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor holds non-finite values")

    def __array__(self, dtype=None, copy=None):
        if dtype is not None:
            return self.data.astype(dtype)
        return self.data

    def __len__(self):
        return self.shape[0] if self.shape else 0

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def as_tensor(x) -> Tensor:
    """Coerce an array-like (or Tensor) into a validated Tensor."""
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class Node:
    op: str
    args: tuple[int, ...]
    shape: tuple[int, ...]
    name: str = ""        # leaves only
    factor: float = 0.0   # scale only


@dataclass(frozen=True)
class Graph:
    """A recorded computation: nodes in topological order plus one output."""

    nodes: tuple[Node, ...]
    leaves: dict[str, int]
    output: int

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.nodes[self.output].shape

    def leaf_shape(self, name: str) -> tuple[int, ...]:
        return self.nodes[self.leaves[name]].shape


def _broadcast_add_shape(a, b, where):
    if a == b:
        return a
    # row broadcast: (n, d) + (d,)
    if len(a) == 2 and b == (a[1],):
        return a
    if len(b) == 2 and a == (b[1],):
        return b
    raise GraphError(f"{where}: cannot add shapes {a} and {b}")


class GraphBuilder:
    """Incrementally records primitive operations, checking shapes as it goes."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._leaves: dict[str, int] = {}

    def _push(self, node: Node) -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    def _shape(self, i: int) -> tuple[int, ...]:
        return self._nodes[i].shape

    def leaf(self, name: str, shape) -> int:
        if name in self._leaves:
            raise GraphError(f"duplicate leaf name {name!r}")
        i = self._push(Node("leaf", (), tuple(int(s) for s in shape), name=name))
        self._leaves[name] = i
        return i

    def add(self, a: int, b: int) -> int:
        shape = _broadcast_add_shape(
            self._shape(a), self._shape(b), f"add node {len(self._nodes)}"
        )
        return self._push(Node("add", (a, b), shape))

    def scale(self, a: int, factor: float) -> int:
        return self._push(Node("scale", (a,), self._shape(a), factor=float(factor)))

    def matmul(self, a: int, b: int) -> int:
        sa, sb = self._shape(a), self._shape(b)
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
            raise GraphError(f"matmul node {len(self._nodes)}: {sa} @ {sb}")
        return self._push(Node("matmul", (a, b), (sa[0], sb[1])))

    def tanh(self, a: int) -> int:
        return self._push(Node("tanh", (a,), self._shape(a)))

    def relu(self, a: int) -> int:
        return self._push(Node("relu", (a,), self._shape(a)))

    def sumsq(self, a: int) -> int:
        return self._push(Node("sumsq", (a,), ()))

    def concat(self, a: int, b: int) -> int:
        sa, sb = self._shape(a), self._shape(b)
        if len(sa) != len(sb) or sa[:-1] != sb[:-1]:
            raise GraphError(f"concat node {len(self._nodes)}: {sa} | {sb}")
        return self._push(Node("concat", (a, b), (*sa[:-1], sa[-1] + sb[-1])))

    def build(self, output: int) -> Graph:
        if not 0 <= output < len(self._nodes):
            raise GraphError(f"output node {output} does not exist")
        return Graph(tuple(self._nodes), dict(self._leaves), output)


def _bind(graph: Graph, inputs) -> dict[str, np.ndarray]:
    bound = {}
    for name, idx in graph.leaves.items():
        if name not in inputs:
            raise GraphError(f"leaf {name!r} not bound")
        arr = np.asarray(as_tensor(inputs[name]).data, dtype=np.float64)
        want = graph.nodes[idx].shape
        if arr.shape != want:
            raise GraphError(f"leaf {name!r}: bound shape {arr.shape}, declared {want}")
        bound[name] = arr
    return bound


def _forward_values(graph: Graph, bound: dict[str, np.ndarray]) -> list[np.ndarray]:
    vals: list[np.ndarray] = [None] * len(graph.nodes)
    for i, node in enumerate(graph.nodes):
        if node.op == "leaf":
            vals[i] = bound[node.name]
        elif node.op == "add":
            vals[i] = vals[node.args[0]] + vals[node.args[1]]
        elif node.op == "scale":
            vals[i] = node.factor * vals[node.args[0]]
        elif node.op == "matmul":
            vals[i] = vals[node.args[0]] @ vals[node.args[1]]
        elif node.op == "tanh":
            vals[i] = np.tanh(vals[node.args[0]])
        elif node.op == "relu":
            vals[i] = np.maximum(vals[node.args[0]], 0.0)
        elif node.op == "sumsq":
            v = vals[node.args[0]]
            vals[i] = np.asarray(np.sum(v * v))
        elif node.op == "concat":
            vals[i] = np.concatenate(
                [vals[node.args[0]], vals[node.args[1]]], axis=-1
            )
        else:  # pragma: no cover - builder only emits the ops above
            raise GraphError(f"unknown op {node.op!r}")
    return vals


def forward_eval(graph: Graph, inputs) -> Tensor:
    """Evaluate the recorded computation against the given leaf bindings."""
    vals = _forward_values(graph, _bind(graph, inputs))
    return Tensor(vals[graph.output])


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.sum(grad, axis=0)  # row-broadcast case: (n, d) back to (d,)


def vjp(graph: Graph, inputs, cotangent, wrt=None) -> dict[str, Tensor]:
    """Gradient of <cotangent, output> with respect to the requested leaves.

    ``wrt`` defaults to every leaf. The accumulation buffers are local to
    the call, so concurrent calls on a shared graph are safe.
    """
    bound = _bind(graph, inputs)
    vals = _forward_values(graph, bound)
    cot = np.asarray(as_tensor(cotangent).data, dtype=np.float64)
    if cot.shape != graph.output_shape:
        raise GraphError(
            f"cotangent shape {cot.shape} does not match output {graph.output_shape}"
        )

    adj: list[np.ndarray] = [None] * len(graph.nodes)
    adj[graph.output] = cot

    def accum(i, g):
        adj[i] = g if adj[i] is None else adj[i] + g

    for i in range(len(graph.nodes) - 1, -1, -1):
        node, g = graph.nodes[i], adj[i]
        if g is None or node.op == "leaf":
            continue
        if node.op == "add":
            a, b = node.args
            accum(a, _unbroadcast(g, graph.nodes[a].shape))
            accum(b, _unbroadcast(g, graph.nodes[b].shape))
        elif node.op == "scale":
            accum(node.args[0], node.factor * g)
        elif node.op == "matmul":
            a, b = node.args
            accum(a, g @ vals[b].T)
            accum(b, vals[a].T @ g)
        elif node.op == "tanh":
            accum(node.args[0], (1.0 - vals[i] * vals[i]) * g)
        elif node.op == "relu":
            accum(node.args[0], (vals[node.args[0]] > 0.0) * g)
        elif node.op == "sumsq":
            accum(node.args[0], 2.0 * vals[node.args[0]] * g)
        elif node.op == "concat":
            a, b = node.args
            split = graph.nodes[a].shape[-1]
            accum(a, g[..., :split])
            accum(b, g[..., split:])

    names = list(graph.leaves) if wrt is None else list(wrt)
    out = {}
    for name in names:
        idx = graph.leaves[name]
        g = adj[idx]
        if g is None:
            g = np.zeros(graph.nodes[idx].shape)
        out[name] = Tensor(g)
    return out


def finite_difference_check(graph: Graph, inputs, step: float, cotangent=None) -> float:
    """Max relative mismatch between vjp and central finite differences.

    The error per leaf coordinate is ``|ad - fd| / max(1, |ad|, |fd|)``, so
    it reads as relative error for O(1) gradients and as absolute error for
    vanishing ones. Defaults to an all-ones cotangent.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    bound = _bind(graph, inputs)
    if cotangent is None:
        cotangent = np.ones(graph.output_shape)
    cot = np.asarray(as_tensor(cotangent).data)

    grads = vjp(graph, bound, cot)

    def objective(b):
        out = _forward_values(graph, b)[graph.output]
        return float(np.sum(cot * out))

    worst = 0.0
    for name, arr in bound.items():
        g_ad = grads[name].data
        flat = arr.ravel()
        for j in range(flat.size):
            shifted = dict(bound)
            plus = arr.copy().ravel()
            plus[j] += step
            shifted[name] = plus.reshape(arr.shape)
            f_plus = objective(shifted)
            minus = arr.copy().ravel()
            minus[j] -= step
            shifted[name] = minus.reshape(arr.shape)
            f_minus = objective(shifted)
            g_fd = (f_plus - f_minus) / (2.0 * step)
            g = g_ad.ravel()[j]
            worst = max(worst, abs(g - g_fd) / max(1.0, abs(g), abs(g_fd)))
    return worst
