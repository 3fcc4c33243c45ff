"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every primitive returns a new :class:`Node` carrying its value, its parents and
a closure mapping the output gradient to per-parent gradients.  Nodes get a
monotonically increasing id at construction, so sorting reachable nodes by id
gives the topological order the forward pass recorded.
"""

import itertools
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shapes."""


class Node:
    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "_backward", "_id")

    def __init__(self, value, op="leaf", parents=(), backward=None, requires_grad=False):
        value = np.asarray(value, dtype=np.float64)
        value.flags.writeable = False
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(value)
        self._backward = backward
        self._id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)


def leaf(value) -> Node:
    """A differentiable input."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> Node:
    return Node(np.array(value, dtype=np.float64), op="const")


def _wrap(x, like: Optional[Node] = None) -> Node:
    if isinstance(x, Node):
        return x
    if like is not None and np.isscalar(x):
        return constant(np.full(like.shape, x))
    return constant(x)


def _make(op, value, parents, backward):
    needs = any(p.requires_grad for p in parents)
    return Node(value, op=op, parents=parents, backward=backward if needs else None,
                requires_grad=needs)


def _mismatch(op, *nodes):
    shapes = ", ".join(str(n.shape) for n in nodes)
    return ShapeError(f"{op}: incompatible shapes {shapes}")


def _is_bias(a: Node, b: Node) -> bool:
    return b.value.ndim == 1 and a.value.ndim >= 1 and a.shape[-1] == b.shape[0]


def _reduce_to(grad, shape):
    if grad.shape == shape:
        return grad
    return grad.reshape(-1, shape[0]).sum(axis=0)


# -- elementwise -----------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may also be a bias vector over the last axis."""
    if a.shape != b.shape and not _is_bias(a, b):
        raise _mismatch("add", a, b)
    return _make("add", a.value + b.value, (a, b),
                 lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: Node, b: Node) -> Node:
    if a.shape != b.shape and not _is_bias(a, b):
        raise _mismatch("sub", a, b)
    return _make("sub", a.value - b.value, (a, b),
                 lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise _mismatch("mul", a, b)
    av, bv = a.value, b.value
    return _make("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _make("scale", a.value * c, (a,), lambda g: (g * c,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


# -- linear algebra and reductions -----------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _mismatch("matmul", a, b)
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _make("matmul", av @ bv, (a, b), backward)


def sum(a: Node, axis: Optional[int] = None) -> Node:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _make("sum", a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape),))
    ax = axis % a.value.ndim
    return _make("sum", a.value.sum(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape),))


def mean(a: Node, axis: Optional[int] = None) -> Node:
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def reshape(a: Node, shape) -> Node:
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Node, axes) -> Node:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.value.ndim)):
        raise ShapeError(f"transpose: axes {axes} do not permute shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _make("transpose", a.value.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def gather_rows(table: Node, index) -> Node:
    """Rows ``table[index]``; gradients scatter-add back into the table."""
    index = np.asarray(index, dtype=np.int64)
    if table.value.ndim != 2 or index.ndim != 1:
        raise ShapeError(f"gather_rows: table {table.shape} with index shape {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table {table.shape}")

    def backward(g):
        out = np.zeros(table.shape)
        np.add.at(out, index, g)
        return (out,)

    return _make("gather_rows", table.value[index], (table,), backward)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = tuple(nodes)
    if not nodes:
        raise ShapeError("concat: no inputs")
    ndim = nodes[0].value.ndim
    ax = axis % ndim
    for n in nodes:
        if n.value.ndim != ndim or any(
                n.shape[d] != nodes[0].shape[d] for d in range(ndim) if d != ax):
            raise _mismatch("concat", *nodes)
    splits = np.cumsum([n.shape[ax] for n in nodes])[:-1]
    return _make("concat", np.concatenate([n.value for n in nodes], axis=ax), nodes,
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def log_softmax(logits: Node) -> Node:
    """Log-probabilities over the last axis, shifted by the row max for stability."""
    if logits.value.ndim == 0 or logits.shape[-1] < 2:
        raise ShapeError(f"log_softmax: vocabulary axis must have length >= 2, got {logits.shape}")
    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _make("log_softmax", out, (logits,),
                 lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def l2_squared_distance(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise _mismatch("l2_squared_distance", a, b)
    diff = sub(a, b)
    return sum(mul(diff, diff))


PRIMITIVES: Dict[str, Callable[..., Node]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "relu": relu,
    "tanh": tanh,
    "sum": sum,
    "mean": mean,
    "gather_rows": gather_rows,
    "concat": lambda *nodes, axis=-1: concat(nodes, axis=axis),
    "scale": scale,
    "reshape": reshape,
    "transpose": transpose,
    "log_softmax": log_softmax,
    "l2_squared_distance": l2_squared_distance,
}


def apply_primitive(op: str, *inputs, **kwargs) -> Node:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# -- reverse pass ----------------------------------------------------------

def _reachable(root: Node) -> List[Node]:
    seen = {id(root)}
    stack, out = [root], []
    while stack:
        node = stack.pop()
        out.append(node)
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    out.sort(key=lambda n: n._id, reverse=True)
    return out


def backward(root: Node, wrt: Optional[Iterable[Node]] = None):
    """Propagate d(root)/d(node) into ``node.grad`` for every reachable node.

    Returns a dict from each reachable leaf to its gradient, or, when ``wrt`` is
    given, a list of gradients in that order (zeros for unreachable nodes).
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    order = _reachable(root) if root.requires_grad else [root]
    for node in order:
        node.grad = np.zeros(node.shape)
    root.grad = np.ones(root.shape)
    for node in order:
        if node._backward is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if g is not None and parent.requires_grad:
                parent.grad = parent.grad + g
    if wrt is not None:
        reached = {id(n) for n in order}
        return [n.grad if id(n) in reached else np.zeros(n.shape) for n in wrt]
    return {n: n.grad for n in order if not n.parents}


def grad(fn: Callable[[Node], Node], point: np.ndarray):
    """Value and gradient of a scalar-valued graph builder at ``point``."""
    x = leaf(point)
    out = fn(x)
    (g,) = backward(out, wrt=[x])
    return float(out.value), g


def finite_difference_gradient(objective: Callable[[np.ndarray], float], point, h: float = 1e-5,
                               indices: Optional[Iterable[int]] = None) -> np.ndarray:
    """Central-difference gradient estimate.

    ``indices`` restricts the estimate to those flat coordinates; the others are
    left at zero.
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    point = np.array(point, dtype=np.float64)
    flat = point.reshape(-1)
    out = np.zeros(flat.shape)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(objective(point))
        flat[i] = orig - h
        lo = float(objective(point))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"objective is not finite at coordinate {i}")
        out[i] = (hi - lo) / (2.0 * h)
    return out.reshape(point.shape)


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """Component-wise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
