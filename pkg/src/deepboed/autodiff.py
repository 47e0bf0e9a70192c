"""Small static-graph reverse-mode autodiff over dense float64 arrays, plus Adam.

A :class:`Graph` is built once symbolically and evaluated many times::

    g = Graph()
    w = g.input("w")
    out = g.sum(w * w)
    forward(g, {"w": np.array(3.0)}, out)     # -> 9.0
    backward(g)["w"]                           # -> 6.0

Nodes are appended in construction order, which is always a valid
topological order. Binary elementwise ops accept equal shapes, a scalar, or
an operand whose shape equals the trailing shape of the other (leading batch
broadcast). Nothing else broadcasts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A forward value contained NaN or Inf."""

    def __init__(self, node: "Node", message: str = ""):
        self.node = node
        where = f"{node.op} (node {node.index}{', ' + node.name if node.name else ''})"
        super().__init__(message or f"non-finite value produced by {where}")


class GraphStateError(RuntimeError):
    pass


class Node:
    __slots__ = ("graph", "index", "op", "inputs", "attrs", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, graph, index, op, inputs, attrs=None, name=None):
        self.graph = graph
        self.index = index
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.index} {self.op}{label}>"

    @property
    def value(self) -> np.ndarray:
        return self.graph.value(self)

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __neg__(self):
        return self.graph.mul(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)


def _check_binary(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim > b.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    if b.ndim > a.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    if grad.shape != shape:
        # scalar operand broadcast against an array of equal rank
        grad = np.asarray(grad.sum()).reshape(shape)
    return grad


class Graph:
    """Ordered list of op records with cached forward values."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.output: Node | None = None
        self._values: list | None = None

    def _node(self, op, inputs=(), attrs=None, name=None) -> Node:
        inputs = [self._lift(x) for x in inputs]
        node = Node(self, len(self.nodes), op, inputs, attrs, name)
        self.nodes.append(node)
        return node

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("node belongs to a different graph")
            return x
        return self.constant(x)

    def value(self, node: Node) -> np.ndarray:
        if self._values is None or self._values[node.index] is None:
            raise GraphStateError("forward has not been run for this node")
        return self._values[node.index]

    # leaves
    def input(self, name: str) -> Node:
        if name in self.inputs:
            raise ValueError(f"duplicate input name {name!r}")
        node = self._node("input", name=name)
        self.inputs[name] = node
        return node

    def constant(self, value) -> Node:
        return self._node("const", attrs={"value": np.asarray(value, dtype=np.float64)})

    # elementwise
    def add(self, a, b) -> Node:
        return self._node("add", (a, b))

    def sub(self, a, b) -> Node:
        return self._node("sub", (a, b))

    def mul(self, a, b) -> Node:
        return self._node("mul", (a, b))

    def tanh(self, a) -> Node:
        return self._node("tanh", (a,))

    def relu(self, a) -> Node:
        return self._node("relu", (a,))

    def exp(self, a) -> Node:
        return self._node("exp", (a,))

    def log(self, a) -> Node:
        return self._node("log", (a,))

    # linear algebra
    def matmul(self, a, b) -> Node:
        return self._node("matmul", (a, b))

    def masked_linear(self, x, weight, bias, mask: np.ndarray) -> Node:
        """``x @ (weight * mask) + bias``; mask is a fixed 0/1 array."""
        return self._node("masked_linear", (x, weight, bias),
                          attrs={"mask": np.asarray(mask, dtype=np.float64)})

    # reductions and shape ops
    def sum(self, a, axis: int | None = None) -> Node:
        return self._node("sum", (a,), attrs={"axis": axis})

    def mean(self, a, axis: int | None = None) -> Node:
        return self._node("mean", (a,), attrs={"axis": axis})

    def broadcast(self, a, like) -> Node:
        """Tile ``a`` over the leading batch dims of ``like``."""
        return self._node("broadcast", (a, like))

    def concat(self, parts: Sequence, axis: int = -1) -> Node:
        return self._node("concat", tuple(parts), attrs={"axis": axis})

    def gather(self, a, index, axis: int = -1) -> Node:
        index = np.asarray(index, dtype=np.intp)
        unique = len(np.unique(index)) == index.size
        return self._node("gather", (a,), attrs={"index": index, "axis": axis, "unique": unique})

    def custom(self, fn: Callable, vjp: Callable, *inputs, name: str | None = None) -> Node:
        """Opaque op. ``fn(*values) -> out``; ``vjp(grad, out, *values) -> tuple of grads``."""
        return self._node("custom", inputs, attrs={"fn": fn, "vjp": vjp}, name=name)


def _forward_op(node: Node, args: list) -> np.ndarray:
    op = node.op
    if op == "add":
        _check_binary(args[0], args[1], op)
        return args[0] + args[1]
    if op == "sub":
        _check_binary(args[0], args[1], op)
        return args[0] - args[1]
    if op == "mul":
        _check_binary(args[0], args[1], op)
        return args[0] * args[1]
    if op == "tanh":
        return np.tanh(args[0])
    if op == "relu":
        return np.maximum(args[0], 0.0)
    if op == "exp":
        with np.errstate(over="ignore"):
            return np.exp(args[0])
    if op == "log":
        if np.any(args[0] <= 0):
            raise FloatingPointError(f"log of non-positive value at node {node.index}")
        return np.log(args[0])
    if op == "matmul":
        a, b = args
        if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return a @ b
    if op == "masked_linear":
        x, w, b = args
        mask = node.attrs["mask"]
        if w.shape != mask.shape or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError(
                f"masked_linear: x {x.shape}, weight {w.shape}, mask {mask.shape}, bias {b.shape}")
        out = x @ (w * mask)
        out += b
        return out
    if op == "sum":
        return np.sum(args[0], axis=node.attrs["axis"])
    if op == "mean":
        return np.mean(args[0], axis=node.attrs["axis"])
    if op == "broadcast":
        a, like = args
        if like.shape[like.ndim - a.ndim:] != a.shape and a.ndim != 0:
            raise ShapeError(f"broadcast: {a.shape} does not trail {like.shape}")
        lead = like.shape[: like.ndim - a.ndim]
        return np.broadcast_to(a, lead + a.shape).copy()
    if op == "concat":
        try:
            return np.concatenate(args, axis=node.attrs["axis"])
        except ValueError as exc:
            raise ShapeError(f"concat: {exc}") from None
    if op == "gather":
        return np.take(args[0], node.attrs["index"], axis=node.attrs["axis"])
    if op == "custom":
        return np.asarray(node.attrs["fn"](*args), dtype=np.float64)
    raise ValueError(f"unknown op {op!r}")


# ops that can turn finite inputs into Inf; everything else is checked at the output
_OVERFLOW_OPS = frozenset({"exp", "custom"})


def forward(graph: Graph, inputs: Mapping[str, np.ndarray], output: Node | None = None,
            check_finite: bool = True) -> np.ndarray:
    """Evaluate every node in order and return the value of ``output``.

    ``output`` defaults to the last node. Intermediates are cached for
    :func:`backward`.
    """
    missing = set(graph.inputs) - set(inputs)
    if missing:
        raise KeyError(f"unbound graph inputs: {sorted(missing)}")
    if output is None:
        output = graph.nodes[-1]
    values: list = [None] * len(graph.nodes)
    graph._values = None
    for node in graph.nodes:
        if node.op == "input":
            val = np.asarray(inputs[node.name], dtype=np.float64)
        elif node.op == "const":
            val = node.attrs["value"]
        else:
            val = _forward_op(node, [values[i.index] for i in node.inputs])
            if check_finite and node.op in _OVERFLOW_OPS and not np.all(np.isfinite(val)):
                graph._values = values
                raise NonFiniteError(node)
        values[node.index] = val
        if node is output:
            break
    graph._values = values
    graph.output = output
    result = values[output.index]
    if check_finite and not np.all(np.isfinite(result)):
        # non-finite values propagate to the output; name the first culprit
        for node in graph.nodes[: output.index + 1]:
            if not np.all(np.isfinite(values[node.index])):
                raise NonFiniteError(node)
    return result


def _backward_op(node: Node, g: np.ndarray, args: list, out: np.ndarray) -> tuple:
    op = node.op
    if op == "add":
        return _unbroadcast(g, args[0].shape), _unbroadcast(g, args[1].shape)
    if op == "sub":
        return _unbroadcast(g, args[0].shape), _unbroadcast(-g, args[1].shape)
    if op == "mul":
        a, b = args
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
    if op == "tanh":
        return (g * (1.0 - out * out),)
    if op == "relu":
        return (g * (args[0] > 0),)
    if op == "exp":
        return (g * out,)
    if op == "log":
        return (g / args[0],)
    if op == "matmul":
        a, b = args
        ga = g @ b.T
        a2 = a.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    if op == "masked_linear":
        x, w, _ = args
        mask = node.attrs["mask"]
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ (w * mask).T
        gw = (x.reshape(-1, x.shape[-1]).T @ g2) * mask
        gb = g2.sum(axis=0)
        return gx, gw, gb
    if op == "sum":
        a = args[0]
        axis = node.attrs["axis"]
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape),)
    if op == "mean":
        a = args[0]
        axis = node.attrs["axis"]
        if axis is None:
            return (np.broadcast_to(g / a.size, a.shape),)
        return (np.broadcast_to(np.expand_dims(g / a.shape[axis], axis), a.shape),)
    if op == "broadcast":
        a, like = args
        return _unbroadcast(g, a.shape), None
    if op == "concat":
        axis = node.attrs["axis"]
        sizes = [a.shape[axis] for a in args]
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))
    if op == "gather":
        a = args[0]
        index = node.attrs["index"]
        axis = node.attrs["axis"] % a.ndim
        ga = np.zeros_like(a)
        if node.attrs["unique"] and axis == a.ndim - 1:
            ga[..., index] = g
            return (ga,)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (ga,)
    if op == "custom":
        return tuple(node.attrs["vjp"](g, out, *args))
    raise ValueError(f"unknown op {op!r}")


def backward(graph: Graph, seed: np.ndarray | float | None = None) -> dict[str, np.ndarray]:
    """Reverse accumulation from the last forward output.

    Returns the gradient of ``sum(output * seed)`` for every named input;
    inputs the output does not depend on get zeros.
    """
    if graph._values is None or graph.output is None:
        raise GraphStateError("backward called before forward")
    values = graph._values
    out_node = graph.output
    out_val = values[out_node.index]
    if seed is None:
        seed = np.ones_like(out_val)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != out_val.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {out_val.shape}")

    grads: list = [None] * len(graph.nodes)
    grads[out_node.index] = seed
    for node in reversed(graph.nodes[: out_node.index + 1]):
        g = grads[node.index]
        if g is None or node.op in ("input", "const"):
            continue
        args = [values[i.index] for i in node.inputs]
        for parent, pg in zip(node.inputs, _backward_op(node, g, args, values[node.index])):
            if pg is None or parent.op == "const":
                continue
            if grads[parent.index] is None:
                grads[parent.index] = pg
            else:
                grads[parent.index] = grads[parent.index] + pg

    result = {}
    for name, node in graph.inputs.items():
        g = grads[node.index]
        val = values[node.index]
        result[name] = np.zeros_like(val) if g is None else np.array(g, dtype=np.float64).reshape(np.shape(val))
    return result


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are untouched."""
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_params[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)


def adam_update_(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
                 state: AdamState) -> None:
    """In-place twin of :func:`adam_step` for hot training loops.

    Overwrites ``params`` arrays and the moment buffers in ``state``.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.eps
        p -= (state.lr / bc1) * m / denom
