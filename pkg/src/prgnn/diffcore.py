"""Dense reverse-mode differentiation on float64 numpy arrays.

Every value is a :class:`Tensor` wrapping an ndarray of rank >= 2: a single
matrix, or a stack of matrices with leading batch axes. Operations record
their inputs and a local-derivative closure as they run (define-by-run), and
``Tensor.backward()`` on a 1x1 result fills ``grad`` on every reachable node.

Binary elementwise operations follow numpy broadcasting; the backward pass
sums gradients back down to each operand's shape.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


# test-only: op names whose backward is deliberately corrupted (see corrupt_gradient)
_CORRUPTED: set[str] = set()
# active kink recorder, or None when not inside grad_check
_KINKS: list[tuple[str, bytes, float]] | None = None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite value encountered")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap(arr: np.ndarray) -> np.ndarray:
    return np.swapaxes(arr, -1, -2)


def record_kink(tag: str, signature: bytes, margin: float) -> None:
    """Register a piecewise choice made during the current forward pass.

    ``signature`` identifies the branch taken (relu sign pattern, selected
    index set); ``margin`` is the distance to the nearest branch boundary.
    Only has an effect while :func:`grad_check` is evaluating.
    """
    if _KINKS is not None:
        _KINKS.append((tag, signature, float(margin)))


class Tensor:
    """A node in the computation graph.

    ``value`` and ``grad`` always share a shape. Leaves have no parents;
    model parameters are leaves.
    """

    __slots__ = ("value", "grad", "op", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, value, *, name: str | None = None, _parents: tuple = (),
                 _backward: Callable[[np.ndarray], None] | None = None, _op: str = "leaf"):
        arr = (np.array(value, dtype=np.float64, copy=True) if _op == "leaf"
               else np.asarray(value, dtype=np.float64))
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        _check_finite(arr, _op)
        self.value: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.op = _op
        self.name = name
        self._parents = _parents
        self._backward = _backward

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[-2]

    @property
    def cols(self) -> int:
        return self.value.shape[-1]

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value.reshape(()))

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def _topo_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Populate ``grad`` on every node reachable from this scalar.

        Gradients from previous backward calls are discarded first.
        """
        if self.value.size != 1:
            raise DimensionError(f"backward() needs a scalar output, got {self.shape}")
        order = self._topo_order()
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)

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

    def __rmatmul__(self, other):
        return matmul(other, self)


DiffNode = Tensor


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, _op="const")


def _make(value: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if op in _CORRUPTED:
        inner = backward

        def backward(g, _inner=inner):
            _inner(g * 1.01 + 1e-3)

    return Tensor(value, _parents=parents, _backward=backward, _op=op)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = np.matmul(a.value, b.value)

    def backward(g):
        a._accumulate(_unbroadcast(np.matmul(g, _swap(b.value)), a.shape))
        b._accumulate(_unbroadcast(np.matmul(_swap(a.value), g), b.shape))

    return _make(out, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(_swap(g))

    return _make(np.ascontiguousarray(_swap(a.value)), (a,), backward, "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = a.value.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out, (a,), backward, "reshape")


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.value - b.value, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        a._accumulate(_unbroadcast(g * b.value, a.shape))
        b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if (b.value == 0).any():
        raise DomainError("div: division by zero")
    out = a.value / b.value

    def backward(g):
        a._accumulate(_unbroadcast(g / b.value, a.shape))
        b._accumulate(_unbroadcast(-g * out / b.value, b.shape))

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(-g)

    return _make(-a.value, (a,), backward, "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    active = a.value > 0
    record_kink("relu", np.packbits(active).tobytes(), np.abs(a.value).min(initial=np.inf))

    def backward(g):
        a._accumulate(g * active)

    return _make(np.where(active, a.value, 0.0), (a,), backward, "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.value)

    def backward(g):
        a._accumulate(g * out * (1.0 - out))

    return _make(out, (a,), backward, "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)

    def backward(g):
        a._accumulate(g * out)

    return _make(out, (a,), backward, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.value <= 0).any():
        raise DomainError("log: non-positive entry (clamp before taking logs)")

    def backward(g):
        a._accumulate(g / a.value)

    return _make(np.log(a.value), (a,), backward, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if (a.value <= 0).any():
        raise DomainError("sqrt: non-positive entry")
    out = np.sqrt(a.value)

    def backward(g):
        a._accumulate(g * 0.5 / out)

    return _make(out, (a,), backward, "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(2.0 * g * a.value)

    return _make(a.value * a.value, (a,), backward, "square")


def clip(a, low: float, high: float) -> Tensor:
    """Clamp into [low, high]; the gradient is zero where clamping applied."""
    a = as_tensor(a)
    inside = (a.value >= low) & (a.value <= high)

    def backward(g):
        a._accumulate(g * inside)

    return _make(np.clip(a.value, low, high), (a,), backward, "clip")


_UNARY = {"relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log, "neg": neg,
          "sqrt": sqrt, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} takes two operands")
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions -------------------------------------------------------------

def _require_nonempty(a: Tensor, op: str) -> None:
    if a.value.size == 0:
        raise DimensionError(f"{op}: empty input {a.shape}")


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    """Sum all entries (result 1x1) or along ``axis`` keeping dimensions."""
    a = as_tensor(a)
    _require_nonempty(a, "sum")
    if axis is None:
        out = np.array([[a.value.sum()]])

        def backward(g):
            a._accumulate(np.broadcast_to(g.reshape(()), a.shape))
    else:
        out = a.value.sum(axis=axis, keepdims=True)

        def backward(g):
            a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out, (a,), backward, "sum")


def mean_rows(a) -> Tensor:
    """Column means: (..., rows, cols) -> (..., 1, cols)."""
    a = as_tensor(a)
    _require_nonempty(a, "mean_rows")
    n = a.shape[-2]

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _make(a.value.mean(axis=-2, keepdims=True), (a,), backward, "mean_rows")


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    _require_nonempty(a, "mean_all")
    n = a.value.size

    def backward(g):
        a._accumulate(np.broadcast_to(g.reshape(()) / n, a.shape))

    return _make(np.array([[a.value.mean()]]), (a,), backward, "mean_all")


def reduce(op: str, a) -> Tensor:
    a = as_tensor(a)
    _require_nonempty(a, op)
    if op == "sum":
        return sum(a)
    if op == "mean_rows":
        return mean_rows(a)
    if op == "mean_all":
        return mean_all(a)
    raise ValueError(f"unknown reduction {op!r}")


# -- indexing and normalisation ---------------------------------------------

def gather_rows(a, idx) -> Tensor:
    """Select rows (axis -2).

    ``idx`` is either a 1-D index list applied to every matrix in the stack,
    or, for a stack of shape (B, rows, cols), a (B, k) array of per-matrix
    indices. Repeated indices are allowed; their gradients add up.
    """
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    if idx.ndim == 1:
        out = a.value[..., idx, :]

        def backward(g):
            full = np.zeros_like(a.value)
            np.add.at(full, (Ellipsis, idx, slice(None)), g)
            a._accumulate(full)
    elif idx.ndim == 2 and a.value.ndim == 3 and idx.shape[0] == a.shape[0]:
        batch = np.arange(a.shape[0])[:, None]
        out = a.value[batch, idx, :]

        def backward(g):
            full = np.zeros_like(a.value)
            np.add.at(full, (batch, idx), g)
            a._accumulate(full)
    else:
        raise DimensionError(f"gather_rows: index shape {idx.shape} incompatible with {a.shape}")
    return _make(np.ascontiguousarray(out), (a,), backward, "gather_rows")


def masked_softmax(a, mask) -> Tensor:
    """Softmax along the last axis restricted to entries where ``mask`` is true.

    Masked-out entries come out as exactly 0. Every row needs at least one
    unmasked entry.
    """
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any(axis=-1).all():
        raise DomainError("masked_softmax: row with no unmasked entries")
    shifted = np.where(mask, a.value, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        a._accumulate(out * (g - inner))

    return _make(out, (a,), backward, "masked_softmax")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        a._accumulate(g - soft * g.sum(axis=-1, keepdims=True))

    return _make(out, (a,), backward, "log_softmax")


@contextlib.contextmanager
def corrupt_gradient(*ops: str) -> Iterator[None]:
    """Test hook: perturb the backward rule of the named ops inside the block."""
    added = [op for op in ops if op not in _CORRUPTED]
    _CORRUPTED.update(added)
    try:
        yield
    finally:
        _CORRUPTED.difference_update(added)


# -- gradient checking ------------------------------------------------------

class EvaluationError(NumericError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    n_excluded: int
    per_param: dict[str, float] = field(default_factory=dict)
    excluded: list[tuple[str, int]] = field(default_factory=list)
    near_kink: bool = False

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g}), "
                f"{self.n_checked} entries checked, {self.n_excluded} excluded at kinks")


def _evaluate(f, arrays: Mapping[str, np.ndarray], single: bool):
    global _KINKS
    previous, _KINKS = _KINKS, []
    try:
        leaves = {k: Tensor(v, name=k) for k, v in arrays.items()}
        out = f(leaves["x"]) if single else f(leaves)
        out = as_tensor(out)
        if out.value.size != 1:
            raise DimensionError(f"grad_check: f must return a scalar, got {out.shape}")
        kinks = _KINKS
    finally:
        _KINKS = previous
    return out, leaves, kinks


def grad_check(f: Callable, point, step: float = 1e-5, tol: float = 1e-4,
               kink_tol: float = 1e-7) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    ``point`` is one array (``f`` then receives one Tensor) or a mapping of
    name -> array (``f`` receives a dict of Tensors). Relative error per entry
    is |g - fd| / max(1, |g|, |fd|). Entries whose +/- perturbation switches a
    recorded branch (relu sign, top-k selection) are excluded rather than
    compared; ``near_kink`` flags a base point within ``kink_tol`` of a branch
    boundary.
    """
    single = not isinstance(point, Mapping)
    arrays = {"x": np.asarray(point, dtype=np.float64)} if single else {
        k: np.asarray(v, dtype=np.float64) for k, v in point.items()}
    out, leaves, base_kinks = _evaluate(f, arrays, single)
    out.backward()
    signature = [(t, s) for t, s, _ in base_kinks]
    near_kink = any(m < kink_tol for _, _, m in base_kinks)

    report = GradCheckReport(0.0, tol, 0, 0, near_kink=near_kink)
    for name, base in arrays.items():
        analytic = leaves[name].grad.reshape(base.shape) if leaves[name].grad is not None \
            else np.zeros_like(base)
        worst = 0.0
        for flat in range(base.size):
            values = []
            switched = False
            for sign in (1.0, -1.0):
                bumped = dict(arrays)
                arr = base.copy()
                arr.flat[flat] += sign * step
                bumped[name] = arr
                try:
                    val, _, kinks = _evaluate(f, bumped, single)
                except (NumericError, DomainError) as exc:
                    raise EvaluationError(f"f not finite at {name}[{flat}] {sign:+}step: {exc}") from exc
                if [(t, s) for t, s, _ in kinks] != signature:
                    switched = True
                values.append(val.item())
            if switched:
                report.n_excluded += 1
                report.excluded.append((name, flat))
                continue
            fd = (values[0] - values[1]) / (2.0 * step)
            g = float(analytic.flat[flat])
            rel = abs(g - fd) / max(1.0, abs(g), abs(fd))
            worst = max(worst, rel)
            report.n_checked += 1
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
