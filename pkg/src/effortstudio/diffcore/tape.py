"""Reverse-mode differentiation over float64 arrays.

Every operation records its inputs and a vector-Jacobian closure on the
output node; ``backward`` on a scalar replays the closures in reverse
topological order. Python scalars and ndarrays mix freely with ``Var``
operands and are treated as constants. The supported operation set is
exactly what the sequence model needs: matrix product, broadcasting
add/mul, sigmoid/tanh/relu, stabilized softmax and log-softmax, exp, log,
sum/mean, concatenation and (basic or integer-array) indexing.

All arrays are float64. Ops raise :class:`NumericError` as soon as they
produce a non-finite value, naming the offending operation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import count
from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import NumericError

# Toggle for the per-op finite check. Kept on by default: desk-scale arrays
# make the scan essentially free and it pinpoints the op that overflowed.
CHECK_FINITE = True


def _const(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce ``grad`` back to ``shape`` after a broadcasting op."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


_CREATION = count()


class Var:
    """One node of the recorded computation: a value plus its adjoint slot."""

    __slots__ = ("value", "grad", "_parents", "_vjp", "_seq")

    # Make numpy defer to our reflected operators for ndarray <op> Var.
    __array_ufunc__ = None

    def __init__(self, value, _parents: tuple = (), _vjp: Callable | None = None):
        self.value = _const(value)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._vjp = _vjp
        self._seq = next(_CREATION)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"

    # -- graph replay ------------------------------------------------------

    def backward(self) -> None:
        # Creation order is a topological order (an op's inputs always exist
        # before its output), so reachability plus a sort replaces a full
        # topological DFS. Adjoints accumulate by reallocation, never in
        # place, so vjp outputs may be shared between parents safely.
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar objective")
        nodes: list[Var] = [self]
        seen = {id(self)}
        stack: list[Var] = [self]
        while stack:
            node = stack.pop()
            for parent in node._parents:
                if id(parent) not in seen:
                    seen.add(id(parent))
                    nodes.append(parent)
                    stack.append(parent)
        nodes.sort(key=lambda n: n._seq, reverse=True)
        self.grad = np.ones_like(self.value)
        for node in nodes:
            if node._vjp is None or node.grad is None:
                continue
            for parent, contribution in node._vjp(node.grad):
                piece = _unbroadcast(contribution, parent.value.shape)
                parent.grad = piece if parent.grad is None else parent.grad + piece

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _node(op: str, value: np.ndarray, parents: tuple, vjp: Callable) -> Var:
    # A single reduction is far cheaper than isfinite().all() and still
    # trips on any nan/inf (inf - inf folds to nan).
    if CHECK_FINITE and not np.isfinite(np.sum(value)):
        raise NumericError(f"non-finite values produced by '{op}'")
    tracked = tuple(p for p in parents if isinstance(p, Var))
    if not tracked:
        return Var(value)
    return Var(value, tracked, vjp)


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else _const(x)


def add(a, b) -> Var:
    av, bv = _value(a), _value(b)
    out = av + bv

    def vjp(g):
        pairs = []
        if isinstance(a, Var):
            pairs.append((a, g))
        if isinstance(b, Var):
            pairs.append((b, g))
        return pairs

    return _node("add", out, (a, b), vjp)


def mul(a, b) -> Var:
    av, bv = _value(a), _value(b)
    out = av * bv

    def vjp(g):
        pairs = []
        if isinstance(a, Var):
            pairs.append((a, g * bv))
        if isinstance(b, Var):
            pairs.append((b, g * av))
        return pairs

    return _node("mul", out, (a, b), vjp)


def div(a, b) -> Var:
    av, bv = _value(a), _value(b)
    with np.errstate(all="ignore"):
        out = av / bv

    def vjp(g):
        pairs = []
        if isinstance(a, Var):
            pairs.append((a, g / bv))
        if isinstance(b, Var):
            pairs.append((b, -g * av / (bv * bv)))
        return pairs

    return _node("div", out, (a, b), vjp)


def power(a, exponent: float) -> Var:
    av = _value(a)
    exponent = float(exponent)
    with np.errstate(all="ignore"):
        out = av**exponent

    def vjp(g):
        return [(a, g * exponent * av ** (exponent - 1.0))]

    return _node("power", out, (a,), vjp)


def matmul(a, b) -> Var:
    av, bv = _value(a), _value(b)
    out = av @ bv

    def vjp(g):
        pairs = []
        if isinstance(a, Var):
            pairs.append((a, g @ bv.T))
        if isinstance(b, Var):
            pairs.append((b, av.T @ g))
        return pairs

    return _node("matmul", out, (a, b), vjp)


def exp(a) -> Var:
    av = _value(a)
    with np.errstate(all="ignore"):
        out = np.exp(av)

    def vjp(g):
        return [(a, g * out)]

    return _node("exp", out, (a,), vjp)


def log(a) -> Var:
    av = _value(a)
    with np.errstate(all="ignore"):
        out = np.log(av)

    def vjp(g):
        return [(a, g / av)]

    return _node("log", out, (a,), vjp)


def tanh(a) -> Var:
    av = _value(a)
    out = np.tanh(av)

    def vjp(g):
        return [(a, g * (1.0 - out * out))]

    return _node("tanh", out, (a,), vjp)


def sigmoid(a) -> Var:
    av = _value(a)
    out = 0.5 * (np.tanh(0.5 * av) + 1.0)  # stable in both tails

    def vjp(g):
        return [(a, g * out * (1.0 - out))]

    return _node("sigmoid", out, (a,), vjp)


def relu(a) -> Var:
    av = _value(a)
    out = np.maximum(av, 0.0)

    def vjp(g):
        return [(a, g * (av > 0.0))]

    return _node("relu", out, (a,), vjp)


def softmax(a, axis: int = -1) -> Var:
    av = _value(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return [(a, out * (g - inner))]

    return _node("softmax", out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Var:
    av = _value(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def vjp(g):
        return [(a, g - probs * g.sum(axis=axis, keepdims=True))]

    return _node("log_softmax", out, (a,), vjp)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Var:
    av = _value(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [(a, np.broadcast_to(g, av.shape))]

    return _node("sum", out, (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Var:
    av = _value(a)
    out = av.mean(axis=axis, keepdims=keepdims)
    count = av.size if axis is None else av.shape[axis]

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [(a, np.broadcast_to(g, av.shape) / count)]

    return _node("mean", out, (a,), vjp)


def concat(parts: Sequence, axis: int = -1) -> Var:
    values = [_value(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pairs = []
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(part, Var):
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                pairs.append((part, g[tuple(index)]))
        return pairs

    return _node("concat", out, tuple(parts), vjp)


def _is_fancy(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def take(a, key) -> Var:
    """Basic slicing plus integer-array fancy indexing; scatter-add backward."""
    av = _value(a)
    out = av[key]
    fancy = _is_fancy(key)

    def vjp(g):
        full = np.zeros_like(av)
        if fancy:
            np.add.at(full, key, g)  # accumulates over repeated indices
        else:
            full[key] += g
        return [(a, full)]

    return _node("take", out, (a,), vjp)


def reshape(a, shape) -> Var:
    av = _value(a)
    out = av.reshape(shape)

    def vjp(g):
        return [(a, g.reshape(av.shape))]

    return _node("reshape", out, (a,), vjp)


def clip(a, lo: float, hi: float) -> Var:
    """Hard clamp; gradient passes only where the input is strictly inside."""
    av = _value(a)
    out = np.clip(av, lo, hi)

    def vjp(g):
        return [(a, g * ((av > lo) & (av < hi)))]

    return _node("clip", out, (a,), vjp)


def square(a) -> Var:
    return mul(a, a)


@dataclass
class ParamTensor:
    """Named learnable array plus its gradient slot.

    Shape is fixed at construction; ``values`` is mutated in place by the
    optimizer, ``grad`` is rewritten by each call to :func:`grad`.
    """

    name: str
    values: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"parameter '{self.name}' initialized with non-finite values")
        self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


Params = dict[str, ParamTensor]
Objective = Callable[[Mapping[str, Var]], Var]


def leaf_vars(params: Params) -> dict[str, Var]:
    return {name: Var(p.values) for name, p in params.items()}


def grad(objective: Objective, params: Params) -> dict[str, np.ndarray]:
    """Evaluate ``objective`` on ``params`` and backpropagate.

    Writes ``p.grad`` for every tensor (zero where the objective does not
    touch it) and returns the same arrays keyed by name. Raises
    :class:`NumericError` if the objective or any gradient is non-finite.
    """
    leaves = leaf_vars(params)
    out = objective(leaves)
    if not isinstance(out, Var):
        raise TypeError("objective must return a Var scalar")
    if out.value.size != 1 or not np.isfinite(out.value):
        raise NumericError("objective did not evaluate to a finite scalar")
    out.backward()
    grads: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = leaves[name].grad
        if g is None:
            g = np.zeros_like(p.values)
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        p.grad = np.asarray(g, dtype=np.float64).reshape(p.values.shape)
        grads[name] = p.grad
    return grads


def evaluate(objective: Objective, params: Params) -> float:
    """Forward-only evaluation; used by the finite-difference checker."""
    out = objective(leaf_vars(params))
    return float(out.value)
