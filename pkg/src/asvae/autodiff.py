"""Reverse-mode automatic differentiation on float64 numpy arrays.

The engine is a classic dynamic tape. Every operation that touches a
tensor requiring gradients records a node holding references to its
inputs and a closure that maps the output gradient to input gradients.
``backward`` on a scalar walks the recorded graph once in reverse
topological order and accumulates gradients additively into the ``grad``
field of every reachable leaf.

Design rules, enforced rather than assumed:

* Tensors are immutable: the wrapped array is marked non-writeable at
  construction. New values mean new tensors.
* A tape is single-use. Walking any node a second time raises
  :class:`~asvae.errors.StateError`; optimizers must rebuild the graph
  each step, which keeps node lifetimes unambiguous.
* Broadcasting is deliberately narrow: operands must either match in
  shape exactly or differ by one leading (batch) axis, as in
  ``[n, d] + [d]``. Anything fancier raises
  :class:`~asvae.errors.ShapeError`. This catches most shape bugs at the
  call site instead of three ops downstream.
* Checked mode (on by default) validates every op's output for
  NaN/Inf and guards domains such as ``log`` of a non-positive value.
  The :func:`checked` context manager switches it off for speed in
  inner loops that have already been validated.

The op vocabulary is exactly what the models in this package need;
:func:`apply_op` exposes the table by name so tests can sweep every op
generically.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, DomainError, NumericsError, ShapeError, StateError
from .rng import RngStream

_CHECKED = True


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Context manager toggling checked mode (NaN/Inf and domain guards)."""
    global _CHECKED
    previous = _CHECKED
    _CHECKED = bool(enabled)
    try:
        yield
    finally:
        _CHECKED = previous


def unchecked():
    """Convenience alias for ``checked(False)``."""
    return checked(False)


def checks_enabled() -> bool:
    return _CHECKED


@dataclass
class _Node:
    """One recorded operation on the tape."""

    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], tuple]
    consumed: bool = field(default=False)


class Tensor:
    """Immutable float64 array plus optional gradient bookkeeping.

    EXAMPLE::

        w = Tensor([[1.0, 2.0]], requires_grad=True)
        y = (w.square()).sum()
        backward(y)
        w.grad  # array([[2., 4.]])
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, _node: _Node | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.base is not None or arr.flags.writeable:
            arr = arr.copy()
        arr.flags.writeable = False
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise NumericsError("tensor created with non-finite entries")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node = _node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no gradient requirement, no tape history."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic operators. Python scalars route to the *_scalar ops so
    # loss code can write `0.5 * x` without wrapping constants.
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(neg(self), float(other))
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            if other == 0.0:
                raise DomainError("division by zero scalar")
            return mul_scalar(self, 1.0 / float(other))
        raise ContractError("tensor/tensor division is not an op; divide by a scalar")

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # Named ops as methods, mirroring the module-level functions.
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def square(self):
        return square(self)

    def sum(self, axis: int | None = None):
        return tsum(self, axis)

    def mean(self, axis: int | None = None):
        return tmean(self, axis)

    def clamp(self, lo: float, hi: float):
        return clamp(self, lo, hi)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _finalize(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result, validating it and recording a node if needed."""
    if _CHECKED and not np.all(np.isfinite(out_data)):
        raise NumericsError(f"op '{op}' produced non-finite values")
    requires = any(t.requires_grad for t in inputs)
    node = _Node(op, inputs, backward_fn) if requires else None
    out_data = np.ascontiguousarray(out_data)
    out_data.flags.writeable = False
    t = Tensor.__new__(Tensor)
    t.data = out_data
    t.requires_grad = requires
    t.grad = None
    t._node = node
    return t


def _batch_relation(a: Tensor, b: Tensor) -> str:
    """Classify the shapes of a binary elementwise op.

    Returns "equal", "b_trails" (b broadcasts over a's leading axis) or
    "a_trails" (the converse); anything else is a shape error.
    """
    if a.shape == b.shape:
        return "equal"
    if a.ndim == b.ndim + 1 and a.shape[1:] == b.shape:
        return "b_trails"
    if b.ndim == a.ndim + 1 and b.shape[1:] == a.shape:
        return "a_trails"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, relation: str, which: str) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if relation == "equal":
        return grad
    if (relation == "b_trails" and which == "b") or (relation == "a_trails" and which == "a"):
        return grad.sum(axis=0)
    return grad


# ---------------------------------------------------------------------------
# Op implementations. Each returns a fresh tensor and, when gradients are
# required, records a closure over whatever forward values backward needs.
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _finalize("matmul", out, (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    rel = _batch_relation(a, b)

    def backward_fn(g):
        ga = _reduce_to(g, rel, "a") if a.requires_grad else None
        gb = _reduce_to(g, rel, "b") if b.requires_grad else None
        return ga, gb

    return _finalize("add", a.data + b.data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    rel = _batch_relation(a, b)

    def backward_fn(g):
        ga = _reduce_to(g, rel, "a") if a.requires_grad else None
        gb = -_reduce_to(g, rel, "b") if b.requires_grad else None
        return ga, gb

    return _finalize("sub", a.data - b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    rel = _batch_relation(a, b)

    def backward_fn(g):
        ga = _reduce_to(g * b.data, rel, "a") if a.requires_grad else None
        gb = _reduce_to(g * a.data, rel, "b") if b.requires_grad else None
        return ga, gb

    return _finalize("mul", a.data * b.data, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _finalize("neg", -a.data, (a,), lambda g: (-g,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return _finalize("add_scalar", a.data + c, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return _finalize("mul_scalar", a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _finalize("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if _CHECKED and np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _finalize("log", out, (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _finalize("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_stable(a.data)
    return _finalize("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _softplus_stable(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _softplus_stable(a.data)
    return _finalize("softplus", out, (a,), lambda g: (g * _sigmoid_stable(a.data),))


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _finalize("square", a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


def _check_axis(axis: int | None) -> None:
    if axis not in (None, -1):
        raise ContractError(f"reductions support axis None or -1, got {axis}")


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    _check_axis(axis)
    if axis is None:
        out = np.asarray(a.data.sum())
        backward_fn = lambda g: (np.broadcast_to(g, a.shape).copy(),)
    else:
        if a.ndim < 1:
            raise ShapeError("axis reduction needs at least one axis")
        out = a.data.sum(axis=-1)
        backward_fn = lambda g: (np.broadcast_to(g[..., None], a.shape).copy(),)
    return _finalize("sum", out, (a,), backward_fn)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    _check_axis(axis)
    if a.data.size == 0:
        raise ShapeError("mean of an empty tensor")
    if axis is None:
        n = a.data.size
        out = np.asarray(a.data.mean())
        backward_fn = lambda g: (np.broadcast_to(g / n, a.shape).copy(),)
    else:
        if a.ndim < 1:
            raise ShapeError("axis reduction needs at least one axis")
        n = a.shape[-1]
        out = a.data.mean(axis=-1)
        backward_fn = lambda g: (np.broadcast_to(g[..., None] / n, a.shape).copy(),)
    return _finalize("mean", out, (a,), backward_fn)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_last needs matching leading dims, got {a.shape}, {b.shape}")
    da = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)

    def backward_fn(g):
        ga = g[..., :da].copy() if a.requires_grad else None
        gb = g[..., da:].copy() if b.requires_grad else None
        return ga, gb

    return _finalize("concat_last", out, (a, b), backward_fn)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.ndim < 1:
        raise ShapeError("slice_last needs at least one axis")
    d = a.shape[-1]
    if not (0 <= start < stop <= d):
        raise ContractError(f"slice [{start}:{stop}] out of range for last dim {d}")
    out = a.data[..., start:stop]

    def backward_fn(g):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        return (full,)

    return _finalize("slice_last", out, (a,), backward_fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    x, b = _as_tensor(x), _as_tensor(b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias needs [n, d] + [d], got {x.shape} + {b.shape}")

    def backward_fn(g):
        gx = g if x.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gb

    return _finalize("add_bias", x.data + b.data, (x, b), backward_fn)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    if not lo < hi:
        raise ContractError(f"clamp needs lo < hi, got [{lo}, {hi}]")
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _finalize("clamp", out, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    out = np.where(a.data > 0.0, a.data, slope * a.data)
    factor = np.where(a.data > 0.0, 1.0, slope)
    return _finalize("leaky_relu", out, (a,), lambda g: (g * factor,))


def logsumexp_last(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim < 1:
        raise ShapeError("logsumexp_last needs at least one axis")
    m = a.data.max(axis=-1, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=-1)
    out = m[..., 0] + np.log(total)
    soft = shifted / total[..., None]
    return _finalize("logsumexp_last", out, (a,), lambda g: (g[..., None] * soft,))


OP_TABLE: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "add_scalar": add_scalar,
    "mul_scalar": mul_scalar,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "square": square,
    "sum": tsum,
    "mean": tmean,
    "concat_last": concat_last,
    "slice_last": slice_last,
    "add_bias": add_bias,
    "clamp": clamp,
    "leaky_relu": leaky_relu,
    "logsumexp_last": logsumexp_last,
}


def apply_op(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch an op by name. Unknown kinds are contract errors."""
    try:
        fn = OP_TABLE[kind]
    except KeyError:
        raise ContractError(f"unknown op kind '{kind}'") from None
    return fn(*inputs, **attrs)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    The root must hold a single element. Each tape node is walked once
    ever; a second backward through any part of the same graph raises
    :class:`~asvae.errors.StateError`. Gradients add into ``grad``
    across calls (on disjoint graphs sharing leaves), so optimizers
    should clear leaf gradients between steps.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, shape {root.shape}")
    if root._node is None:
        if root.requires_grad:
            seed = np.ones(root.shape)
            root.grad = seed if root.grad is None else root.grad + seed
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        if t._node is None:
            continue
        if done:
            topo.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        if t._node.consumed:
            raise StateError(f"tape already consumed at op '{t._node.op}'")
        stack.append((t, True))
        for parent in t._node.inputs:
            if parent._node is not None and id(parent) not in visited:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for t in reversed(topo):
        node = t._node
        node.consumed = True
        g = grads.pop(id(t), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        if len(input_grads) != len(node.inputs):
            raise ContractError(f"op '{node.op}' returned a bad gradient count")
        for parent, pg in zip(node.inputs, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"op '{node.op}' gradient shape {pg.shape} != input shape {parent.shape}"
                )
            if _CHECKED and not np.all(np.isfinite(pg)):
                raise NumericsError(f"op '{node.op}' produced a non-finite gradient")
            if parent._node is not None:
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
            else:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg


def sample_standard_normal(stream: RngStream, shape: tuple[int, ...]) -> Tensor:
    """Draw N(0, 1) noise as a constant tensor (no gradient flows into it)."""
    return Tensor(stream.normal(shape))


def _scaled_gradient_identity(a: Tensor, scale: float) -> Tensor:
    """Forward identity whose backward multiplies gradients by ``scale``.

    Test hook only: a deliberately wrong derivative (any scale != 1) lets
    harnesses confirm that gradient checkers actually catch bad tapes.
    """
    a = _as_tensor(a)
    return _finalize("scaled_gradient_identity", a.data.copy(), (a,), lambda g: (g * scale,))


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against finite differences.

    ``max_rel_err`` is ``|analytic - numeric| / max(1, |analytic|,
    |numeric|)`` maximized over every checked entry: a relative error
    with a unit floor on the denominator, so tiny gradients are compared
    absolutely and large ones relatively.
    """

    per_param: dict[str, float]
    max_rel_err: float
    worst_param: str
    worst_index: int
    analytic_at_worst: float
    numeric_at_worst: float
    entries_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild its graph from the given leaf tensors on
    every call and must be bit-deterministic (reset any noise streams it
    uses internally); this is verified by evaluating it twice before any
    gradients are taken. The harness wiggles each parameter entry in
    place through a temporary writability window, which is the one
    sanctioned exception to tensor immutability.
    """
    for name, p in params.items():
        if not isinstance(p, Tensor) or not p.requires_grad:
            raise ContractError(f"param '{name}' must be a Tensor with requires_grad")

    v1 = loss_fn().item()
    v2 = loss_fn().item()
    if v1 != v2:
        raise ContractError(
            f"loss function is not deterministic ({v1!r} != {v2!r}); "
            "reset internal noise streams per call"
        )

    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    analytic = {
        name: (np.zeros(p.shape) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }

    per_param: dict[str, float] = {}
    worst = (0.0, "", 0, 0.0, 0.0)
    checked_entries = 0
    for name, p in params.items():
        flat_analytic = analytic[name].reshape(-1)
        numeric = np.zeros_like(flat_analytic)
        for i in range(p.data.size):
            idx = np.unravel_index(i, p.shape) if p.ndim else ()
            original = float(p.data[idx])
            p.data.flags.writeable = True
            try:
                p.data[idx] = original + h
                f_plus = loss_fn().item()
                p.data[idx] = original - h
                f_minus = loss_fn().item()
            finally:
                p.data[idx] = original
                p.data.flags.writeable = False
            numeric[i] = (f_plus - f_minus) / (2.0 * h)
        err = np.abs(flat_analytic - numeric) / np.maximum(
            1.0, np.maximum(np.abs(flat_analytic), np.abs(numeric))
        )
        checked_entries += p.data.size
        worst_i = int(err.argmax()) if err.size else 0
        per_param[name] = float(err[worst_i]) if err.size else 0.0
        if per_param[name] > worst[0]:
            worst = (per_param[name], name, worst_i, flat_analytic[worst_i], numeric[worst_i])

    return GradCheckReport(
        per_param=per_param,
        max_rel_err=worst[0],
        worst_param=worst[1],
        worst_index=worst[2],
        analytic_at_worst=float(worst[3]),
        numeric_at_worst=float(worst[4]),
        entries_checked=checked_entries,
        tol=tol,
    )
