"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable quantity in the toolkit is a :class:`Tensor`.  Operations
on tracked tensors are appended to the active :class:`Tape`; :func:`backward`
replays that tape in reverse and deposits gradients on the tracked leaves.

Broadcasting is deliberately narrow: elementwise operands must have equal
shapes, or one of them must be a scalar.  Anything else needs an explicit
:func:`broadcast_to`.  Operations that would produce NaN or Inf raise instead.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NonFiniteError, ParameterError

__all__ = [
    "Tensor", "Tape", "active_tape", "no_grad", "is_grad_enabled", "backward", "grad_check",
    "add", "sub", "mul", "div", "neg", "matmul", "relu", "tanh", "sigmoid", "exp", "log",
    "sqrt", "clamp_min", "sum", "mean", "sqnorm", "norm", "l2_normalize", "concat",
    "reshape", "transpose", "broadcast_to", "take_rows", "take_along", "softmax",
    "logsumexp", "dropout", "grad_reverse", "activation",
]


class Tensor:
    """Dense float64 array, optionally participating in the gradient tape."""

    __slots__ = ("data", "tracked", "grad", "_leaf")

    def __init__(self, data, tracked: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.tracked = bool(tracked)
        self.grad: np.ndarray | None = None
        self._leaf = True

    @classmethod
    def _from_op(cls, value: np.ndarray, tracked: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = value
        out.tracked = tracked
        out.grad = None
        out._leaf = not tracked
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
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

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis=axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass(frozen=True)
class _Record:
    name: str
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered log of executed operations.

    Used as a context manager, a tape becomes the active one for the duration
    of the block and is cleared on exit.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def record(self, name: str, out: Tensor, inputs: tuple, backward_fn) -> None:
        self._records.append(_Record(name, out, inputs, backward_fn))

    @property
    def records(self) -> tuple:
        return tuple(self._records)

    def op_names(self) -> list[str]:
        return [r.name for r in self._records]

    def clear(self) -> None:
        self._records.clear()

    def __len__(self):
        return len(self._records)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        self.clear()
        return False


_TAPES: list[Tape] = [Tape()]
_GRAD_ENABLED = [True]


def active_tape() -> Tape:
    return _TAPES[-1]


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


@contextlib.contextmanager
def no_grad():
    """Disable recording; results are untracked."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._from_op(np.asarray(x, dtype=np.float64), False)


def _make(name: str, value: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    tracked = is_grad_enabled() and any(t.tracked for t in inputs)
    out = Tensor._from_op(value, tracked)
    if tracked:
        active_tape().record(name, out, inputs, backward_fn)
    return out


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None, retain: bool = False,
             tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    ``inputs`` restricts which leaves receive gradients.  The tape is cleared
    afterwards unless ``retain`` is set.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", type(loss).__name__)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if not loss.tracked:
        raise ContractError("loss does not depend on any tracked tensor")
    tape = tape if tape is not None else active_tape()
    if not loss.is_leaf and not any(r.out is loss for r in tape._records):
        raise ContractError("loss was not produced on the active tape")

    wanted = None if inputs is None else {id(t) for t in inputs}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf:
        leaves[id(loss)] = loss
    for rec in reversed(tape._records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.tracked:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
            if inp.is_leaf:
                leaves[key] = inp
    for key, leaf in leaves.items():
        if wanted is not None and key not in wanted:
            continue
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    if not retain:
        tape.clear()


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``f`` may close over other tracked parameters; their ``.grad`` is left
    untouched.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(x0, tracked=True)
    with Tape():
        out = f(probe)
        if out.tracked:
            backward(out, inputs=[probe])
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    with no_grad():
        for idx in np.ndindex(x0.shape):
            plus = x0.copy()
            plus[idx] += eps
            minus = x0.copy()
            minus[idx] -= eps
            numeric[idx] = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_elementwise(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if a.size != 1 and b.size != 1:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not conform")
    # the size-1 operand must not add dimensions to the result
    small, big = (a, b) if a.size == 1 and (b.size != 1 or a.ndim <= b.ndim) else (b, a)
    if small.ndim > big.ndim:
        raise DimensionError(f"{name}: scalar of shape {small.shape} would reshape {big.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supports ``(..., m, k) @ (k, n)`` with a shared right operand,
    ``(..., m, k) @ (..., k, n)`` with equal batch dimensions, and 1-D
    operands on either side (treated as row / column vectors).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    A = a.data[None, :] if a.ndim == 1 else a.data
    B = b.data[:, None] if b.ndim == 1 else b.data
    if A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    if B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ, shapes {a.shape} and {b.shape}")
    out2 = A @ B
    out = out2
    if b.ndim == 1:
        out = out[..., 0]
    if a.ndim == 1:
        out = out[..., 0, :] if b.ndim > 1 else out[..., 0]

    def _back(g):
        g2 = g.reshape(out2.shape)
        gA = g2 @ np.swapaxes(B, -1, -2)
        if B.ndim == 2 and A.ndim > 2:
            gB = A.reshape(-1, A.shape[-1]).T @ g2.reshape(-1, g2.shape[-1])
        else:
            gB = np.swapaxes(A, -1, -2) @ g2
        return gA.reshape(a.shape), gB.reshape(b.shape)

    return _make("matmul", out, (a, b), _back)


# ---------------------------------------------------------------------------
# unary nonlinearities


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def identity(x) -> Tensor:
    return _as_tensor(x)


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "linear": identity,
                "identity": identity}


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ParameterError(f"unknown activation {name!r}; choose from {sorted(_ACTIVATIONS)}")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log: nonpositive input")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(x.data)
    safe = np.where(out > 0, out, 1.0)

    def _back(g):
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return _make("sqrt", out, (x,), _back)


def clamp_min(x, floor: float) -> Tensor:
    """``max(x, floor)`` elementwise; gradient flows only where x >= floor."""
    x = _as_tensor(x)
    keep = x.data >= floor
    return _make("clamp_min", np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and norms


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def _back(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", out, (x,), _back)


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise DomainError("mean of an empty tensor")
    out = np.mean(x.data, axis=axes)

    def _back(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make("mean", out, (x,), _back)


def sqnorm(x, axis=-1) -> Tensor:
    """Squared L2 norm along ``axis`` (``None`` for the whole tensor)."""
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data * x.data, axis=axes)

    def _back(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (2.0 * g * x.data,)

    return _make("sqnorm", out, (x,), _back)


def norm(x, axis=-1) -> Tensor:
    """Euclidean norm along ``axis``; zero-norm slices get a zero gradient."""
    return sqrt(sqnorm(x, axis=axis))


def l2_normalize(x, axis=-1) -> Tensor:
    x = _as_tensor(x)
    ax = axis % x.ndim
    n = np.sqrt(np.sum(x.data * x.data, axis=ax, keepdims=True))
    if np.any(n == 0):
        raise DomainError("l2_normalize: zero vector")
    out = x.data / n

    def _back(g):
        dot = np.sum(g * out, axis=ax, keepdims=True)
        return ((g - out * dot) / n,)

    return _make("l2_normalize", out, (x,), _back)


# ---------------------------------------------------------------------------
# shape manipulation and indexing


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise DimensionError("concat: no tensors")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
                t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise DimensionError(
                f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def _back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", out, ts, _back)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {x.shape} as {shape}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape) -> Tensor:
    """Explicit numpy-style expansion; the backward pass sums the copies."""
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot expand {x.shape} to {shape}") from None
    lead = len(shape) - x.ndim

    def _back(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make("broadcast_to", out, (x,), _back)


def take_rows(x, index) -> Tensor:
    """Row gather ``x[index]``; repeated indices accumulate gradient."""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise DimensionError(f"take_rows: index out of range for shape {x.shape}")

    def _back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make("take_rows", x.data[idx], (x,), _back)


def take_along(x, index) -> Tensor:
    """Per-row pick ``x[i, index[i]]`` of a 2-D tensor."""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError(f"take_along: need 2-D input and one index per row, "
                             f"got {x.shape} and {idx.shape}")
    rows = np.arange(x.shape[0])

    def _back(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _make("take_along", x.data[rows, idx], (x,), _back)


# ---------------------------------------------------------------------------
# normalizers


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def _back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make("softmax", out, (x,), _back)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    w = e / s

    def _back(g):
        return (np.expand_dims(g, axis) * w,)

    return _make("logsumexp", out, (x,), _back)


# ---------------------------------------------------------------------------
# stochastic and adversarial layers


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng")
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make("dropout", x.data * scale, (x,), lambda g: (g * scale,))


def grad_reverse(x, lam: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam``."""
    x = _as_tensor(x)
    lam = float(lam)
    return _make("grad_reverse", x.data.copy(), (x,), lambda g: (-lam * g,))
