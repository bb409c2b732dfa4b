"""A small define-by-run reverse-mode autodiff engine over float64 numpy arrays.

Operations run eagerly. While a :class:`Tape` is active, every operation with
at least one grad-requiring input appends a record to it; ``Tape.backward``
replays the records in exact reverse order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class RankError(ValueError):
    pass


class UninitializedGradError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def numpy(self) -> np.ndarray:
        return self.value


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


# ---------------------------------------------------------------- tape

_active: list["Tape"] = []


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def backward(self, loss: Tensor) -> None:
        if loss.value.size != 1 or loss.value.ndim > 1:
            raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        seen: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, fn in reversed(self.records):
            g_out = grads.get(id(out))
            if g_out is None:
                continue
            for t, g in zip(inputs, fn(g_out)):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    seen[key] = t
        for key, t in seen.items():
            if t.requires_grad:
                t.grad = grads[key] if t.grad is None else t.grad + grads[key]


def _record(out_value: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_value, requires_grad=needs and bool(_active))
    if out.requires_grad:
        _active[-1].records.append((out, tuple(inputs), fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


# ---------------------------------------------------------------- primitives


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector broadcast over ``a``'s rows."""
    if a.shape == b.shape:
        return _record(a.value + b.value, (a, b), lambda g: (g, g))
    if a.value.ndim == 2 and b.value.ndim == 1 and a.shape[1] == b.shape[0]:
        return _record(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.value * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def fn(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:  # matrix @ vector
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:  # vector @ matrix
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return _record(av @ bv, (a, b), fn)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.value)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    return _record(t, (a,), lambda g: (g * (1.0 - t * t),))


def neg_log_sigmoid(a: Tensor) -> Tensor:
    """``-ln sigmoid(x)`` computed stably as ``softplus(-x)``."""
    x = a.value
    return _record(np.logaddexp(0.0, -x), (a,), lambda g: (-g * _sigmoid(-x),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.array(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_cols(a: Tensor) -> Tensor:
    """Row sums of a matrix, giving a vector."""
    if a.value.ndim != 2:
        raise ShapeError(f"sum_cols expects a matrix, got {a.shape}")
    n = a.shape[1]
    return _record(a.value.sum(axis=1), (a,), lambda g: (np.repeat(g[:, None], n, axis=1),))


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean over rows: (n, d) -> (d,)."""
    if a.value.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"mean_rows expects a non-empty matrix, got {a.shape}")
    n = a.shape[0]
    return _record(a.value.mean(axis=0), (a,), lambda g: (np.tile(g / n, (n, 1)),))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    if not train or p == 0.0:
        return a
    if not 0 <= p < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _record(a.value * mask, (a,), lambda g: (g * mask,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    vals = [p.value for p in parts]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _record(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _record(out, (a,), lambda g: (g.reshape(old),))


def take_range(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice ``a[start:stop]`` of a vector."""
    n = a.shape[0]

    def fn(g):
        full = np.zeros(n)
        full[start:stop] = g
        return (full,)

    return _record(a.value[start:stop], (a,), fn)


def index_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``a[idx]`` with scatter-add backward."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.value[idx], (a,), fn)


def spmm(A: sp.spmatrix, x: Tensor) -> Tensor:
    """Sparse-constant times dense: edge-list aggregation with cost O(nnz * d)."""
    if A.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: shape mismatch {A.shape} vs {x.shape}")
    A = A.tocsr()
    return _record(np.asarray(A @ x.value), (x,), lambda g: (np.asarray(A.T @ g),))


# ---------------------------------------------------------------- Adam


class Adam:
    """Bias-corrected Adam over a named parameter set."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise UninitializedGradError(f"parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.value = p.value - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
