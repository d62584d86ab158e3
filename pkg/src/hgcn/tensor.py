"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the tape that is active in the current
thread (see :class:`Tape`). Outside a tape they run as plain numpy, which
is what evaluation uses.
"""

from __future__ import annotations

import builtins
import functools
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not fit the primitive."""

    def __init__(self, primitive: str, *shapes: tuple):
        self.primitive = primitive
        self.shapes = shapes
        listed = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {listed}")


class DomainError(ValueError):
    """Input lies outside the primitive's domain (e.g. log of 0)."""


class Tensor:
    __slots__ = ("data", "name", "__weakref__")
    # make ndarray <op> Tensor defer to the Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if type(x) is Tensor else Tensor(x)


_OPEN_LOCK = threading.Lock()


@dataclass
class Node:
    primitive: str
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager to make it the active tape of the current thread::

        with Tape() as tape:
            loss = f(params)
        backward(tape, loss, params)
    """

    _local = threading.local()
    # tapes open in any thread; lets untaped evaluation skip the thread-local lookup
    _open = 0

    def __init__(self):
        self.nodes: list[Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        Tape._stack().append(self)
        with _OPEN_LOCK:
            Tape._open += 1
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack().pop()
        with _OPEN_LOCK:
            Tape._open -= 1

    def __len__(self) -> int:
        return len(self.nodes)

    @staticmethod
    def _stack() -> list:
        if not hasattr(Tape._local, "stack"):
            Tape._local.stack = []
        return Tape._local.stack

    @staticmethod
    def active() -> "Tape | None":
        stack = getattr(Tape._local, "stack", None)
        return stack[-1] if stack else None

    def record(self, primitive: str, out: Tensor, inputs: tuple, vjp) -> None:
        self.nodes.append(Node(primitive, out, inputs, vjp))
        self._outputs.add(id(out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs


class ParamStore:
    """Named trainable tensors with gradient accumulators, in insertion order."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.grad: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, name=name)
        self._params[name] = t
        self.grad[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for g in self.grad.values():
            g.fill(0.0)

    def count(self, prefix: str = "") -> int:
        return builtins.sum(p.size for n, p in self._params.items() if n.startswith(prefix))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for n, p in self._params.items():
            arr = np.asarray(values[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"load {n}", arr.shape, p.shape)
            p.data[...] = arr

    def save(self, path) -> None:
        np.savez(path, **self.snapshot())

    @classmethod
    def from_arrays(cls, values: dict[str, np.ndarray]) -> "ParamStore":
        store = cls()
        for n, v in values.items():
            store.add(n, v)
        return store


# ---------------------------------------------------------------------------
# primitives


def _emit(primitive: str, data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    if Tape._open:
        stack = getattr(Tape._local, "stack", None)
        if stack:
            stack[-1].record(primitive, out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(primitive: str, ufunc, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return ufunc(a.data, b.data)
    except ValueError:
        raise ShapeError(primitive, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", _binary("add", np.add, a, b), (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", _binary("sub", np.subtract, a, b), (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", _binary("mul", np.multiply, a, b), (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("div", np.divide, a, b)
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def add_along(x, v, axis: int = -1) -> Tensor:
    """Add vector ``v`` to every slice of ``x`` along ``axis``.

    For a matrix and ``axis=-1`` this is the usual bias add: ``v`` has one
    entry per column and is added to each row.
    """
    x, v = as_tensor(x), as_tensor(v)
    axis = axis % x.ndim
    if v.ndim != 1 or v.shape[0] != x.shape[axis]:
        raise ShapeError("add_along", x.shape, v.shape)
    shape = [1] * x.ndim
    shape[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return _emit("add_along", x.data + v.data.reshape(shape), (x, v),
                 lambda g: (g, g.sum(axis=others)))


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    return _emit("scale", x.data * s, (x,), lambda g: (g * s,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


@functools.lru_cache(maxsize=None)
def _einsum_indices(subscripts: str) -> tuple[str, str, str]:
    lhs, out_idx = subscripts.replace(" ", "").split("->")
    a_idx, b_idx = lhs.split(",")
    for i in set(a_idx) | set(b_idx):
        if i not in out_idx and not (i in a_idx and i in b_idx):
            raise ValueError(f"einsum: index {i!r} summed within a single operand")
    return a_idx, b_idx, out_idx


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum, e.g. ``"nm,nmd->md"``.

    Every index summed away must occur in both operands, which keeps the
    vector-Jacobian products themselves plain einsums.
    """
    a, b = as_tensor(a), as_tensor(b)
    a_idx, b_idx, out_idx = _einsum_indices(subscripts)
    try:
        out = np.einsum(subscripts, a.data, b.data)
    except ValueError:
        raise ShapeError(f"einsum {subscripts}", a.shape, b.shape) from None

    def vjp(g):
        return (np.einsum(f"{out_idx},{b_idx}->{a_idx}", g, b.data),
                np.einsum(f"{out_idx},{a_idx}->{b_idx}", g, a.data))

    return _emit("einsum", out, (a, b), vjp)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _emit("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError(f"log: non-positive input (min {x.data.min():.3g}); clamp first")
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _emit("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    p = float(p)
    if p < 1 and np.any(x.data <= 0):
        raise DomainError(f"power({p}): non-positive input")
    out = x.data ** p
    return _emit("power", out, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where clamping is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", np.asarray(out, dtype=np.float64), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(t.shape for t in ts)) from None
    return _emit("stack", out, ts,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), vjp)


def norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """L2 norm along ``axis``. The gradient at a zero vector is taken as 0."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    out = n if keepdims else np.squeeze(n, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(n > 0, x.data / n, 0.0)
        return (g * unit,)

    return _emit("norm", out, (x,), vjp)


def squash(x, axis: int = -1) -> Tensor:
    """Capsule nonlinearity x * |x| / (1 + |x|^2) along ``axis``.

    Output length is |x|^2 / (1 + |x|^2). A zero vector maps to zero with
    zero Jacobian.
    """
    x = as_tensor(x)
    n2 = (x.data * x.data).sum(axis=axis, keepdims=True)
    n = np.sqrt(n2)
    factor = n / (1.0 + n2)
    out = x.data * factor

    def vjp(g):
        # d factor / dn divided by n; the product with x (x . g) vanishes at n = 0
        with np.errstate(invalid="ignore", divide="ignore"):
            radial = np.where(n > 0, (1.0 - n2) / ((1.0 + n2) ** 2 * n), 0.0)
        return (g * factor + x.data * (radial * (g * x.data).sum(axis=axis, keepdims=True)),)

    return _emit("squash", out, (x,), vjp)


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Tensor, params: ParamStore) -> None:
    """Accumulate d(loss)/d(param) into ``params.grad``.

    The tape is left intact, so calling this twice without zeroing doubles
    every accumulator.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("backward: loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for name, p in params.items():
        g = grads.get(id(p))
        if g is not None:
            params.grad[name] += g


def value_and_grad(f: Callable[[ParamStore], Tensor], params: ParamStore) -> float:
    """Zero the accumulators, evaluate ``f`` on a fresh tape and backpropagate."""
    params.zero_grad()
    with Tape() as tape:
        loss = f(params)
    backward(tape, loss, params)
    return loss.item()


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    nonfinite: list[tuple[str, tuple]] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def failures(self) -> list[str]:
        bad = [n for n, e in self.max_rel_error.items() if not e < self.tolerance]
        bad += [n for n, _ in self.nonfinite if n not in bad]
        return bad

    @property
    def passed(self) -> bool:
        return not self.failures


def _probe(f, params) -> float:
    try:
        with np.errstate(all="ignore"):
            return f(params).item()
    except DomainError:
        return float("nan")


def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore,
               step: float = 1e-5, tolerance: float = 1e-4,
               names: Sequence[str] | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences, entry by entry."""
    if step <= 0:
        raise ValueError("step must be positive")
    value_and_grad(f, params)
    analytic = {n: params.grad[n].copy() for n in params}
    report = GradCheckReport({}, tolerance=tolerance)
    for name in names or params.names():
        p = params[name].data
        worst = 0.0
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            fp = _probe(f, params)
            p[idx] = orig - step
            fm = _probe(f, params)
            p[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.nonfinite.append((name, idx))
                continue
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[name][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        report.max_rel_error[name] = worst
    return report
