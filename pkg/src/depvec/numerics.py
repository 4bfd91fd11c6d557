"""Dense fp64 tensors with a tape-based reverse mode, Adam, and a finite-difference oracle.

Every trainable quantity in the package is a :class:`Tensor`.  Primitive
applications are appended to the innermost active :class:`Tape` whenever at
least one input requires a gradient; :func:`backward` replays the tape in
reverse and accumulates gradients into leaf tensors.

    >>> w = Tensor([2.0, -1.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(mul(w, w))
    >>> backward(loss, tape)
    >>> w.grad.tolist()
    [4.0, -2.0]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of non-conforming shapes."""


class NumericDomainError(ValueError):
    """Raised when log/softmax see non-finite (or out-of-domain) input."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through the recorded primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications (the computation record)."""

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.entries)


_ACTIVE: list[Tape] = []


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    tracking = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.requires_grad = tracking
    result.grad = None
    result.name = None
    if tracking:
        _ACTIVE[-1].entries.append(TapeEntry(op, tuple(inputs), result, vjp))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (g @ B.T if need_a else None), (A.T @ g if need_b else None)

    return _record("matmul", (a, b), A @ B, vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    A, B = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g * B, A.shape) if need_a else None), (_unbroadcast(g * A, B.shape) if need_b else None)

    return _record("mul", (a, b), A * B, vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    A, B = a.data, b.data
    out = A / B

    def vjp(g):
        return _unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape)

    return _record("div", (a, b), out, vjp)


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record("scalar_mul", (a,), a.data * c, lambda g: (g * c,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat(axis={axis}): incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return np.split(g, bounds, axis=axis)

    return _record("concat", tensors, out, vjp)


def slice_(a, start: int, stop: int, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.data.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeError(f"slice: range [{start}, {stop}) outside axis {ax} of shape {a.shape}")
    index = [slice(None)] * a.data.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record("slice", (a,), a.data[index].copy(), vjp)


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _record("mean", (a,), np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)) or np.any(a.data <= 0.0):
        raise NumericDomainError("log: input must be finite and strictly positive")
    A = a.data
    return _record("log", (a,), np.log(A), lambda g: (g / A,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) without the cancellation of composing the two."""
    a = as_tensor(a)
    A = a.data
    out = np.minimum(A, 0.0) - np.log1p(np.exp(-np.abs(A)))
    return _record("log_sigmoid", (a,), out, lambda g: (g * _sigmoid(-A),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _record("leaky_relu", (a,), a.data * scale, lambda g: (g * scale,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _record("abs", (a,), np.abs(a.data), lambda g: (g * sign,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericDomainError("softmax: input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (a,), out, vjp)


def dropout(a, p: float, train: bool, key: Sequence[int] = (0,)) -> Tensor:
    """Inverted dropout; the mask is drawn from a generator seeded by ``key``."""
    a = as_tensor(a)
    if not train or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must lie in [0, 1), got {p}")
    rng = np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _record("dropout", (a,), a.data * mask, lambda g: (g * mask,))


def _segment_sum(values: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    """out[r] = sum of values[i] with index[i] == r, added in ascending ``i``."""
    order = np.argsort(index, kind="stable")
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(index, minlength=n_rows), out=indptr[1:])
    S = sparse.csr_matrix((np.ones(len(index)), order, indptr), shape=(n_rows, len(index)))
    return np.asarray(S @ values)


def gather_rows(a, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected a matrix, got shape {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")
    shape = a.shape

    def vjp(g):
        return (_segment_sum(g, index, shape[0]),)

    return _record("gather_rows", (a,), a.data[index], vjp)


def scatter_add_rows(a, index, n_rows: int) -> Tensor:
    """out[index[i]] += a[i]; rows are accumulated in ascending ``i``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"scatter_add_rows: index of shape {index.shape} does not match rows of {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise ShapeError(f"scatter_add_rows: index out of range for {n_rows} rows")
    out = _segment_sum(a.data, index, n_rows)
    return _record("scatter_add_rows", (a,), out, lambda g: (g[index],))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scalar_mul": scalar_mul,
    "concat": concat,
    "slice": slice_,
    "sum": sum_,
    "mean": mean,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "abs": abs_,
    "softmax": softmax,
    "dropout": dropout,
    "gather_rows": gather_rows,
    "scatter_add_rows": scatter_add_rows,
    "reshape": reshape,
}


def apply_primitive(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}; known: {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- reverse mode


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    The tape is cleared afterwards.
    """
    if loss.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    produced = {id(e.output) for e in tape.entries}
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if id(loss) not in produced and loss.requires_grad and loss.grad is not None:
        loss.grad += 1.0
    for entry in reversed(tape.entries):
        g = pending.pop(id(entry.output), None)
        if g is None:
            continue
        for tensor, tg in zip(entry.inputs, entry.vjp(g)):
            if tg is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in produced:
                if key in pending:
                    pending[key] = pending[key] + tg
                else:
                    pending[key] = tg
            else:
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += tg.reshape(tensor.shape)
    tape.entries.clear()


def finite_difference_gradient(f: Callable[[], float | Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``param`` (perturbed in place)."""
    flat = param.data.reshape(-1)
    out = np.zeros(flat.shape)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        plus = _as_float(f())
        flat[i] = keep - h
        minus = _as_float(f())
        flat[i] = keep
        out[i] = (plus - minus) / (2.0 * h)
    return out.reshape(param.shape)


def _as_float(value) -> float:
    if isinstance(value, Tensor):
        return float(value.data.reshape(-1)[0])
    return float(value)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), taken over all entries."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction.  Gradients are zeroed after each step."""

    def __init__(self, params: Iterable[Tensor] | dict[str, Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if isinstance(params, dict):
            self.params = dict(params)
        else:
            self.params = {p.name or f"param{i}": p for i, p in enumerate(params)}
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"adam_step: parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad[...] = 0.0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def adam_step(state: Adam, params: dict[str, Tensor] | None = None) -> None:
    if params is not None and set(params) != set(state.params):
        raise ValueError("adam_step: parameter set differs from the optimizer state")
    state.step()
