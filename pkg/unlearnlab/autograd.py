"""
Tape-based reverse-mode differentiation over numpy arrays.

A ``Tape`` records every primitive in execution order together with its
forward function and its vector-Jacobian product. ``Tape.replay()``
re-executes the recorded forward functions from the leaf values, and
``backward`` walks the tape in reverse accumulating gradients.
``stop_gradient`` records an identity whose vjp is never taken.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from unlearnlab.errors import NonScalarLoss, ShapeMismatch

logger = logging.getLogger(__name__)

_TINY = 1e-300

ArrayLike = Union[np.ndarray, float, int]


class Node:
    __slots__ = ("op", "fn", "parents", "vjp", "value", "requires_grad")

    def __init__(self, op, fn, parents, vjp, value, requires_grad):
        self.op = op
        self.fn = fn
        self.parents = parents
        self.vjp = vjp
        self.value = value
        self.requires_grad = requires_grad


class Var:
    """Handle to a recorded value on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.index].requires_grad

    @property
    def T(self) -> "Var":
        return transpose(self)

    def item(self) -> float:
        return float(self.value.item())

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        node = self.tape.nodes[self.index]
        return f"Var(op={node.op}, shape={node.value.shape})"


class Tape:
    """Ordered record of primitives; the ComputationTape."""

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value: ArrayLike, requires_grad: bool = True) -> Var:
        arr = np.array(value, dtype=np.float64)
        self.nodes.append(Node("leaf", None, (), None, arr, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value: ArrayLike) -> Var:
        return self.leaf(value, requires_grad=False)

    def lift(self, x: Union[Var, ArrayLike]) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ShapeMismatch("operands recorded on different tapes")
            return x
        return self.constant(x)

    def record(self, op: str, fn: Callable, parents: Sequence[Var], vjp: Optional[Callable]) -> Var:
        values = [p.value for p in parents]
        out = np.asarray(fn(*values), dtype=np.float64)
        requires = vjp is not None and any(p.requires_grad for p in parents)
        self.nodes.append(Node(op, fn, tuple(p.index for p in parents), vjp, out, requires))
        return Var(self, len(self.nodes) - 1)

    def replay(self) -> List[np.ndarray]:
        """Recompute every node from the leaf values in recorded order."""
        values: List[np.ndarray] = []
        for node in self.nodes:
            if node.fn is None:
                values.append(node.value)
            else:
                args = [values[i] for i in node.parents]
                values.append(np.asarray(node.fn(*args), dtype=np.float64))
        return values

    def replay_matches(self) -> bool:
        return all(np.array_equal(v, n.value) for v, n in zip(self.replay(), self.nodes))

    def backward(self, loss: Var) -> Dict[int, np.ndarray]:
        """Reverse pass from a scalar loss; returns gradients keyed by node index."""
        if loss.tape is not self:
            raise ShapeMismatch("loss recorded on a different tape")
        if loss.value.size != 1:
            raise NonScalarLoss(f"loss has shape {loss.value.shape}")

        grads: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for index in range(loss.index, -1, -1):
            g = grads.get(index)
            if g is None:
                continue
            node = self.nodes[index]
            if node.vjp is None or not node.requires_grad:
                continue
            parent_values = [self.nodes[i].value for i in node.parents]
            parent_grads = node.vjp(g, parent_values, node.value)
            for parent_index, pg in zip(node.parents, parent_grads):
                if pg is None or not self.nodes[parent_index].requires_grad:
                    continue
                if parent_index in grads:
                    grads[parent_index] = grads[parent_index] + pg
                else:
                    grads[parent_index] = pg
        return grads

    def gradient(self, loss: Var, wrt: Sequence[Var]) -> List[np.ndarray]:
        """Gradients of ``loss`` for each of ``wrt``; zeros where no path exists."""
        grads = self.backward(loss)
        return [np.array(grads.get(v.index, np.zeros_like(v.value)), dtype=np.float64) for v in wrt]


def backward(tape: Tape, loss: Var, params: Sequence[Var]) -> List[np.ndarray]:
    return tape.gradient(loss, params)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary_operands(a, b) -> Tuple[Var, Var]:
    if isinstance(a, Var):
        return a, a.tape.lift(b)
    if isinstance(b, Var):
        return b.tape.lift(a), b
    raise TypeError("at least one operand must be a taped Var")


# --- primitives -------------------------------------------------------------

def add(a, b) -> Var:
    a, b = _binary_operands(a, b)
    return a.tape.record(
        "add", np.add, (a, b),
        lambda g, xs, out: (_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)),
    )


def sub(a, b) -> Var:
    a, b = _binary_operands(a, b)
    return a.tape.record(
        "sub", np.subtract, (a, b),
        lambda g, xs, out: (_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)),
    )


def mul(a, b) -> Var:
    a, b = _binary_operands(a, b)
    return a.tape.record(
        "mul", np.multiply, (a, b),
        lambda g, xs, out: (_unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)),
    )


def div(a, b) -> Var:
    a, b = _binary_operands(a, b)
    return a.tape.record(
        "div", np.divide, (a, b),
        lambda g, xs, out: (
            _unbroadcast(g / xs[1], xs[0].shape),
            _unbroadcast(-g * xs[0] / (xs[1] * xs[1]), xs[1].shape),
        ),
    )


def neg(a: Var) -> Var:
    return a.tape.record("neg", np.negative, (a,), lambda g, xs, out: (-g,))


def matmul(a, b) -> Var:
    a, b = _binary_operands(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatch(f"matmul shapes {a.value.shape} and {b.value.shape}")
    return a.tape.record(
        "matmul", np.matmul, (a, b),
        lambda g, xs, out: (g @ xs[1].T, xs[0].T @ g),
    )


def transpose(a: Var) -> Var:
    return a.tape.record("transpose", np.transpose, (a,), lambda g, xs, out: (g.T,))


def tanh(a: Var) -> Var:
    return a.tape.record("tanh", np.tanh, (a,), lambda g, xs, out: (g * (1.0 - out * out),))


def exp(a: Var) -> Var:
    return a.tape.record("exp", np.exp, (a,), lambda g, xs, out: (g * out,))


def _safe_log(x: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(x, _TINY))


def log(a: Var) -> Var:
    """Natural log; inputs below 1e-300 are clamped and receive zero gradient."""
    def vjp(g, xs, out):
        x = xs[0]
        return (np.where(x > _TINY, g / np.maximum(x, _TINY), 0.0),)
    return a.tape.record("log", _safe_log, (a,), vjp)


def sqrt(a: Var) -> Var:
    def vjp(g, xs, out):
        return (np.where(out > 0.0, 0.5 * g / np.where(out > 0.0, out, 1.0), 0.0),)
    return a.tape.record("sqrt", np.sqrt, (a,), vjp)


def sum_(a: Var, axis: Optional[int] = None, keepdims: bool = False) -> Var:
    def fn(x):
        return np.sum(x, axis=axis, keepdims=keepdims)

    def vjp(g, xs, out):
        shape = xs[0].shape
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return a.tape.record("sum", fn, (a,), vjp)


def mean(a: Var, axis: Optional[int] = None) -> Var:
    count = a.value.size if axis is None else a.value.shape[axis]
    return sum_(a, axis=axis) / float(count)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(a: Var) -> Var:
    """Row-wise softmax with max subtraction."""
    def vjp(g, xs, out):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)
    return a.tape.record("softmax", _softmax_rows, (a,), vjp)


def log_softmax(a: Var) -> Var:
    def vjp(g, xs, out):
        return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)
    return a.tape.record("log_softmax", _log_softmax_rows, (a,), vjp)


def take_rows(a: Var, columns: np.ndarray) -> Var:
    """out[i] = a[i, columns[i]]."""
    cols = np.asarray(columns, dtype=np.int64)
    rows = np.arange(cols.shape[0])

    def fn(x):
        return x[rows, cols]

    def vjp(g, xs, out):
        grad = np.zeros_like(xs[0])
        grad[rows, cols] = g
        return (grad,)
    return a.tape.record("take_rows", fn, (a,), vjp)


def _identity(x: np.ndarray) -> np.ndarray:
    return x


def stop_gradient(a: Var) -> Var:
    """Identity in the forward pass; blocks all gradient flow into ``a``."""
    return a.tape.record("stop_gradient", _identity, (a,), None)


def frobenius(a: Var) -> Var:
    return sqrt(sum_(a * a))
