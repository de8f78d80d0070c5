"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array and carries an optional gradient slot.
While a ``Tape`` is active, every operation records its inputs, output and a
local gradient rule; ``backward`` replays the tape in reverse and accumulates
gradients onto every tensor that participated in the computation. Outside a
tape context the same operations run as plain numpy and record nothing, which
is how evaluation avoids graph overhead.

Everything is float64. Desk-scale problem sizes make precision cheaper than
debugging float32 gradient-check noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeMismatch(AutodiffError):
    """Operand shapes do not conform to the op's rule."""

    def __init__(self, op: str, shapes: Sequence[tuple[int, ...]]):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {list(self.shapes)}")


class DomainError(AutodiffError):
    """Input outside the mathematical domain of the op (log/sqrt of negatives)."""


class ContractError(AutodiffError):
    """A caller violated an API precondition."""


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """Dense float64 value with an optional same-shape gradient."""

    __slots__ = ("data", "grad", "node_id")

    def __init__(self, data, grad=None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        if grad is not None:
            grad = _as_array(grad)
            if grad.shape != self.data.shape:
                raise ContractError(
                    f"grad shape {grad.shape} != data shape {self.data.shape}"
                )
            self.grad = grad
        # Identifier within the active tape; assigned on first recording.
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values that no gradient will flow through."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={'set' if self.grad is not None else 'none'})"

    # Arithmetic sugar; numbers and arrays are promoted to constant tensors.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered log of recorded operations. Inputs always precede consumers.

    One tape is active per training step; ``backward`` consumes it.
    """

    _records: list[_Record] = field(default_factory=list)
    _nodes: list[Tensor] = field(default_factory=list)
    _ids: dict[int, int] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _assign(self, t: Tensor) -> None:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = len(self._nodes)
            self._ids[id(t)] = nid
            self._nodes.append(t)
        t.node_id = nid

    def record(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor, grad_fn) -> None:
        for t in inputs:
            self._assign(t)
        self._assign(output)
        self._records.append(_Record(kind, inputs, output, grad_fn))

    def clear(self) -> None:
        self._records.clear()
        self._nodes.clear()
        self._ids.clear()

    def backward(self, loss: Tensor) -> None:
        """Accumulate dLoss/dT onto every tensor recorded on this tape.

        The tape is cleared afterwards. Gradients add onto any existing
        ``.grad`` contents, so zero parameter grads before each step.
        """
        if loss.data.shape != ():
            raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
        if not self._records:
            raise ContractError("backward on an empty tape")
        if self._ids.get(id(loss)) is None:
            raise ContractError("loss was not recorded on this tape")

        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[self._ids[id(loss)]] = np.ones((), dtype=np.float64)

        for rec in reversed(self._records):
            g_out = grads[self._ids[id(rec.output)]]
            if g_out is None:
                continue
            contribs = rec.grad_fn(g_out)
            for t, g in zip(rec.inputs, contribs):
                if g is None:
                    continue
                nid = self._ids[id(t)]
                # Copy on first write: grad_fns may hand back views of g_out.
                grads[nid] = np.array(g) if grads[nid] is None else grads[nid] + g

        for t, g in zip(self._nodes, grads):
            if g is not None:
                t.grad = g if t.grad is None else t.grad + g
        self.clear()


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from ``loss`` on the active tape."""
    tape = active_tape()
    if tape is None:
        raise ContractError("backward called with no active tape")
    tape.backward(loss)


def _record(kind: str, inputs: tuple[Tensor, ...], out: Tensor, grad_fn) -> Tensor:
    tape = active_tape()
    if tape is not None:
        tape.record(kind, inputs, out, grad_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeMismatch("add", (a.shape, b.shape)) from None
    return _record(
        "add", (a, b), out,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ShapeMismatch("sub", (a.shape, b.shape)) from None
    return _record(
        "sub", (a, b), out,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeMismatch("mul", (a.shape, b.shape)) from None
    return _record(
        "mul", (a, b), out,
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data / b.data)
    except ValueError:
        raise ShapeMismatch("div", (a.shape, b.shape)) from None
    return _record(
        "div", (a, b), out,
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record("neg", (a,), out, lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", (a.shape, b.shape))
    try:
        out = Tensor(np.matmul(a.data, b.data))
    except ValueError:
        raise ShapeMismatch("matmul", (a.shape, b.shape)) from None

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record("matmul", (a, b), out, grad_fn)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    return _record("relu", (a,), out, lambda g: (g * (a.data > 0.0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)
    return _record("sigmoid", (a,), out, lambda g: (g * y * (1.0 - y),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data))
    x = a.data

    def grad_fn(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * s,)

    return _record("softplus", (a,), out, grad_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    return _record("exp", (a,), out, lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError(f"log of non-positive value (min={a.data.min()})")
    out = Tensor(np.log(a.data))
    return _record("log", (a,), out, lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError(f"sqrt of negative value (min={a.data.min()})")
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record("sqrt", (a,), out, lambda g: (g / (2.0 * y),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    # Subgradient 0 at the kink.
    return _record("abs", (a,), out, lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * a.data)
    return _record("square", (a,), out, lambda g: (g * 2.0 * a.data,))


# ---------------------------------------------------------------------------
# Shape and reductions
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError:
        raise ShapeMismatch("reshape", (a.shape, tuple(shape))) from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.data.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("concat of zero tensors")
    try:
        out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    except ValueError:
        raise ShapeMismatch("concat", tuple(t.shape for t in ts)) from None
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        sl = [slice(None)] * g.ndim
        ax = axis % g.ndim
        pieces = []
        for i in range(len(ts)):
            sl[ax] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _record("concat", ts, out, grad_fn)


def _expand_reduced(g: np.ndarray, axis, keepdims: bool) -> np.ndarray:
    if axis is None or keepdims:
        return g
    return np.expand_dims(g, axis)


def _n_reduced(a: Tensor, axis) -> int:
    if axis is None:
        return a.size
    return a.shape[axis]


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))

    def grad_fn(g):
        return (np.broadcast_to(_expand_reduced(g, axis, keepdims), a.data.shape),)

    return _record("sum", (a,), out, grad_fn)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ContractError("mean of an empty tensor")
    out = Tensor(np.mean(a.data, axis=axis, keepdims=keepdims))
    n = _n_reduced(a, axis)

    def grad_fn(g):
        return (np.broadcast_to(_expand_reduced(g, axis, keepdims), a.data.shape) / n,)

    return _record("mean", (a,), out, grad_fn)


def variance(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Population variance (divide by n) over ``axis`` or over all elements."""
    a = as_tensor(a)
    n = _n_reduced(a, axis)
    if n < 1:
        raise ContractError("variance requires reduction length >= 1")
    centered = a.data - np.mean(a.data, axis=axis, keepdims=True)
    out = Tensor(np.var(a.data, axis=axis, keepdims=keepdims))

    def grad_fn(g):
        ge = _expand_reduced(g, axis, keepdims)
        return (2.0 * centered * ge / n,)

    return _record("variance", (a,), out, grad_fn)


def squared_error(a, b, reduction: str = "mean") -> Tensor:
    """Reduced squared error between same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch("squared_error", (a.shape, b.shape))
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction '{reduction}'")
    diff = a.data - b.data
    if reduction == "mean":
        if a.size == 0:
            raise ContractError("squared_error over an empty tensor")
        out = Tensor(np.mean(diff * diff))
        scale = 2.0 / a.size
    else:
        out = Tensor(np.sum(diff * diff))
        scale = 2.0

    def grad_fn(g):
        d = g * scale * diff
        return d, -d

    return _record("squared_error", (a, b), out, grad_fn)


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "abs": absolute,
    "square": square,
    "reshape": reshape,
    "concat": concat,
    "sum": reduce_sum,
    "mean": mean,
    "variance": variance,
    "squared_error": squared_error,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by kind name. Same behavior as calling it directly."""
    fn = OPS.get(kind)
    if fn is None:
        raise ContractError(f"unknown op kind '{kind}'")
    if kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Gradient utilities
# ---------------------------------------------------------------------------


def grad_norm(tensors: Iterable[Tensor], mode: str = "mean_of_norms") -> float:
    """Gradient magnitude of a parameter group.

    ``mean_of_norms``: arithmetic mean over tensors of each tensor's L2 norm.
    ``norm_of_all``: single L2 norm of the concatenation of all gradients.
    """
    ts = list(tensors)
    if not ts:
        raise ContractError("grad_norm of an empty parameter group")
    for t in ts:
        if t.grad is None:
            raise ContractError("grad_norm before backward: a tensor has no gradient")
    if mode == "mean_of_norms":
        return float(np.mean([np.linalg.norm(t.grad) for t in ts]))
    if mode == "norm_of_all":
        return float(math.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in ts)))
    raise ContractError(f"unknown grad_norm mode '{mode}'")


@dataclass
class FiniteDiffReport:
    """Per-parameter worst relative error of analytic vs central differences."""

    per_param: dict[str, float]
    flagged: list[str]
    max_rel_err: float
    tol: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return not self.flagged


def finite_diff_check(
    closure: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
    max_coords_per_param: int | None = None,
) -> FiniteDiffReport:
    """Compare analytic gradients of ``closure()`` against central differences.

    The closure must be deterministic (freeze any noise draws before calling).
    Relative error is ``|fd - analytic| / max(|fd|, |analytic|, 1)``. When
    ``max_coords_per_param`` is set, that many coordinates are sampled per
    tensor; otherwise every coordinate is checked. Report-only: nothing raises
    on failure.
    """
    for t in params.values():
        t.grad = None
    with Tape():
        loss = closure()
        backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }

    per_param: dict[str, float] = {}
    flagged: list[str] = []
    n_checked = 0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        worst = 0.0
        an_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(closure().data)
            flat[i] = orig - h
            f_minus = float(closure().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            an = an_flat[i]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1.0)
            worst = max(worst, rel)
            n_checked += 1
        per_param[name] = worst
        if worst > tol:
            flagged.append(name)

    overall = max(per_param.values()) if per_param else 0.0
    return FiniteDiffReport(per_param, flagged, overall, tol, n_checked)
