"""Reverse-mode automatic differentiation on dense numpy arrays.

A small tape: every op records its parents and one vector-Jacobian closure
per differentiable input; ``Tensor.backward`` replays the tape in reverse
topological order. Values inherit the dtype of their inputs (tests and
reproducible runs use 64-bit, training may use 32-bit). Reductions go
through numpy's pairwise summation, so single-threaded runs are bit-stable.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "set_nan_guard",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "const_matmul",
    "concat",
    "slice_cols",
    "take_rows",
    "sum_",
    "mean",
    "relu",
    "log",
    "exp",
    "sqrt",
    "clamp_min",
    "softmax",
    "layernorm",
    "dropout",
    "l2norm_rows",
    "cosine_rows",
    "required_ops",
    "grad_check",
    "GradCheckReport",
]

_grad_enabled = True
_nan_guard = False

# Floor-form LayerNorm stabilizer: rows with variance above this are
# standardized exactly; near-constant rows divide by sqrt(eps) instead.
LAYERNORM_EPS = 1e-5


def set_nan_guard(on: bool) -> None:
    """Enable per-op finiteness assertions (test mode)."""
    global _nan_guard
    _nan_guard = bool(on)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the tape (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus a gradient slot and a link into the tape."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray] | None, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; keyword ops below are the canonical surface.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.values.size != 1:
                raise ValueError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.values)
        order = _topo_order(self)
        self.grad = np.asarray(seed, dtype=self.values.dtype)
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if vjp is None:
                    continue
                pg = vjp(g)
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; tapes for deep models overflow the recursion limit.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def tensor(values, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(values, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.values.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(values: np.ndarray, inputs: Sequence[Tensor], vjps: Sequence[Callable | None]) -> Tensor:
    if _nan_guard and not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite values produced by an op under nan guard")
    requires = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=requires)
    if requires:
        out._parents = tuple(inputs)
        out._vjps = tuple(v if t.requires_grad else None for t, v in zip(inputs, vjps))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over the axes numpy broadcast to reach its shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.values + b.values
    return _make(out, (a, b), (
        lambda g: _unbroadcast(g, a.values.shape),
        lambda g: _unbroadcast(g, b.values.shape),
    ))


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.values - b.values
    return _make(out, (a, b), (
        lambda g: _unbroadcast(g, a.values.shape),
        lambda g: _unbroadcast(-g, b.values.shape),
    ))


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.values * b.values
    return _make(out, (a, b), (
        lambda g: _unbroadcast(g * b.values, a.values.shape),
        lambda g: _unbroadcast(g * a.values, b.values.shape),
    ))


def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.values / b.values
    return _make(out, (a, b), (
        lambda g: _unbroadcast(g / b.values, a.values.shape),
        lambda g: _unbroadcast(-g * a.values / (b.values * b.values), b.values.shape),
    ))


def scale(x, c: float) -> Tensor:
    x = _wrap(x)
    c = float(c)
    return _make(x.values * c, (x,), (lambda g: g * c,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b, transpose_b: bool = False) -> Tensor:
    a = _wrap(a)
    b = _wrap(b)
    bv = b.values.T if transpose_b else b.values
    out = a.values @ bv

    def grad_a(g):
        return g @ (b.values if transpose_b else b.values.T)

    def grad_b(g):
        return g.T @ a.values if transpose_b else a.values.T @ g

    return _make(out, (a, b), (grad_a, grad_b))


def const_matmul(mat, x) -> Tensor:
    """Left-multiply by a constant (possibly sparse) matrix: mat @ x."""
    x = _wrap(x)
    out = mat @ x.values
    if sp.issparse(mat):
        out = np.asarray(out)
    mat_t = mat.T

    def grad_x(g):
        r = mat_t @ g
        return np.asarray(r) if sp.issparse(mat_t) else r

    return _make(out, (x,), (grad_x,))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def concat(parts: Iterable[Tensor], axis: int = 1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.values.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _make(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _wrap(x)
    out = x.values[..., start:stop]

    def vjp(g):
        full = np.zeros_like(x.values)
        full[..., start:stop] = g
        return full

    return _make(np.ascontiguousarray(out), (x,), (vjp,))


def take_rows(x, idx) -> Tensor:
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = x.values[idx]

    def vjp(g):
        full = np.zeros_like(x.values)
        np.add.at(full, idx, g)
        return full

    return _make(out, (x,), (vjp,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, x.values.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.values.shape).copy()

    return _make(out, (x,), (vjp,))


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    n = x.values.size if axis is None else x.values.shape[axis]
    out = x.values.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, x.values.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / n, x.values.shape).copy()

    return _make(out, (x,), (vjp,))


# ---------------------------------------------------------------------------
# nonlinearities and normalizers
# ---------------------------------------------------------------------------

def relu(x) -> Tensor:
    x = _wrap(x)
    out = np.maximum(x.values, 0)
    return _make(out, (x,), (lambda g: g * (x.values > 0),))


def log(x) -> Tensor:
    x = _wrap(x)
    return _make(np.log(x.values), (x,), (lambda g: g / x.values,))


def exp(x) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.values)
    return _make(out, (x,), (lambda g: g * out,))


def sqrt(x) -> Tensor:
    x = _wrap(x)
    out = np.sqrt(x.values)
    return _make(out, (x,), (lambda g: g * 0.5 / out,))


def clamp_min(x, floor: float) -> Tensor:
    x = _wrap(x)
    out = np.maximum(x.values, floor)
    # Pass-through subgradient where unclamped.
    return _make(out, (x,), (lambda g: g * (x.values > floor),))


def softmax(x) -> Tensor:
    """Row softmax over the last axis, max-shifted for stability."""
    x = _wrap(x)
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - inner)

    return _make(out, (x,), (vjp,))


def layernorm(x, eps: float = LAYERNORM_EPS) -> Tensor:
    """Standardize each row over the last axis (pre-affine LayerNorm).

    The denominator is sqrt(max(var, eps)): rows with variance above eps are
    standardized exactly (mean 0, variance 1), near-constant rows stay finite.
    """
    x = _wrap(x)
    d = x.values.shape[-1]
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    denom = np.sqrt(np.maximum(var, eps))
    out = centered / denom
    active = var > eps

    def vjp(g):
        g_centered = g - g.mean(axis=-1, keepdims=True)
        # Active rows get the variance term; clipped rows see a constant denom.
        corr = out * (g * out).mean(axis=-1, keepdims=True)
        return np.where(active, (g_centered - corr) / denom, g_centered / denom)

    return _make(out, (x,), (vjp,))


def dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    x = _wrap(x)
    if p <= 0.0:
        return _make(x.values.copy(), (x,), (lambda g: g,))
    keep = (rng.random(x.values.shape) >= p).astype(x.values.dtype)
    factor = 1.0 / (1.0 - p)
    out = x.values * keep * factor
    return _make(out, (x,), (lambda g: g * keep * factor,))


def l2norm_rows(x, keepdims: bool = True) -> Tensor:
    """Euclidean norm of each row; zero rows get zero gradient."""
    x = _wrap(x)
    out = np.sqrt((x.values * x.values).sum(axis=-1, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, -1)
        safe = np.where(out == 0, 1.0, out)
        if not keepdims:
            safe = np.expand_dims(safe, -1)
        return g * x.values / safe

    return _make(out, (x,), (vjp,))


def cosine_rows(a, b, zero_floor: float = 1e-12) -> Tensor:
    """Cosine similarity of every row of `a` against every row of `b`.

    Composed from primitive ops, so gradients come for free. Rows whose norm
    is at/below zero are treated as zero vectors: their cosines are 0.
    """
    a = _wrap(a)
    b = _wrap(b)
    an = div(a, clamp_min(l2norm_rows(a), zero_floor))
    bn = div(b, clamp_min(l2norm_rows(b), zero_floor))
    return matmul(an, bn, transpose_b=True)


def required_ops() -> tuple[str, ...]:
    """The op surface the model pipeline needs, each with gradients."""
    return (
        "matmul",
        "add",
        "mul",
        "sub",
        "broadcast",
        "concat",
        "slice",
        "mean",
        "sum",
        "l2norm",
        "softmax",
        "layernorm",
        "relu",
        "dropout",
        "cosine",
        "log",
        "scale",
    )


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    worst_param: str = ""
    coords_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar f() against central differences.

    Coordinates are exhaustive unless `max_coords_per_param` caps them
    (sampled with `rng`). Parameters must be 64-bit for the differences to
    resolve at the default step.
    """
    for name, p in params.items():
        if p.values.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 params; {name} is {p.values.dtype}")
        p.zero_grad()

    loss = f()
    if loss.values.size != 1:
        raise ValueError("grad_check target must be scalar")
    if not np.isfinite(loss.values):
        raise FloatingPointError("non-finite loss in grad_check")
    loss.backward()
    analytic = {
        name: (np.zeros_like(p.values) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }

    report = GradCheckReport(max_rel_err=0.0, tol=tol)
    for name, p in params.items():
        flat = p.values.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                f_plus = float(f().values)
            flat[i] = orig - h
            with no_grad():
                f_minus = float(f().values)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
            report.coords_checked += 1
        report.per_param[name] = worst
        if worst > report.max_rel_err:
            report.max_rel_err = worst
            report.worst_param = name
    return report


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)
