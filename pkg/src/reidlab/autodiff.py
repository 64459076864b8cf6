"""Minimal reverse-mode differentiation engine over dense float64 arrays.

Tensors form an acyclic graph; calling :func:`backward` on a scalar root
accumulates d(root)/d(leaf) into the ``grad`` field of every leaf that has
``requires_grad`` set.  Gradients add up across calls, so callers reset
them between optimization steps (see :func:`zero_grads`).

Graph construction and backward are single-threaded per graph; distinct
graphs may live on distinct threads.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operator inputs have incompatible shapes."""


def _as_tensor(x) -> "Tensor":
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array with a gradient buffer and an op record."""

    __slots__ = ("values", "grad", "requires_grad", "op_kind", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False,
                 parents: tuple = (), op_kind: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = requires_grad
        self.op_kind = op_kind
        self._parents = parents
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def is_leaf(self) -> bool:
        return self.op_kind is None

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def backward(self) -> dict:
        return backward(self)

    def __repr__(self) -> str:
        kind = self.op_kind or "leaf"
        return f"Tensor({kind}, shape={self.shape})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return multiply(self, -1.0)

    def __getitem__(self, idx):
        return gather(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


# ---------------------------------------------------------------------------
# operator registry

OP_REGISTRY: dict[str, Callable] = {}


def _register(kind: str):
    def deco(fn):
        OP_REGISTRY[kind] = fn
        return fn
    return deco


def build_op(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Dispatch an operator by name; ``attrs`` become keyword arguments."""
    if kind not in OP_REGISTRY:
        known = ", ".join(sorted(OP_REGISTRY))
        raise ValueError(f"unknown op kind {kind!r}; registered: {known}")
    return OP_REGISTRY[kind](*inputs, **(attrs or {}))


def _make(values: np.ndarray, parents: tuple[Tensor, ...], kind: str) -> Tensor:
    out = Tensor(values, requires_grad=any(p.requires_grad for p in parents),
                 parents=parents, op_kind=kind)
    return out


def _broadcast_values(kind: str, a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        return fn(a.values, b.values)
    except ValueError as exc:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic

@_register("add")
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(_broadcast_values("add", a, b, np.add), (a, b), "add")

    def back():
        a.grad += _unbroadcast(out.grad, a.shape)
        b.grad += _unbroadcast(out.grad, b.shape)
    out._backward = back
    return out


@_register("subtract")
def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(_broadcast_values("subtract", a, b, np.subtract), (a, b), "subtract")

    def back():
        a.grad += _unbroadcast(out.grad, a.shape)
        b.grad -= _unbroadcast(out.grad, b.shape)
    out._backward = back
    return out


@_register("multiply")
def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(_broadcast_values("multiply", a, b, np.multiply), (a, b), "multiply")

    def back():
        a.grad += _unbroadcast(out.grad * b.values, a.shape)
        b.grad += _unbroadcast(out.grad * a.values, b.shape)
    out._backward = back
    return out


@_register("divide")
def divide(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(_broadcast_values("divide", a, b, np.divide), (a, b), "divide")

    def back():
        a.grad += _unbroadcast(out.grad / b.values, a.shape)
        b.grad += _unbroadcast(-out.grad * a.values / (b.values * b.values), b.shape)
    out._backward = back
    return out


@_register("matmul")
def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _make(a.values @ b.values, (a, b), "matmul")

    def back():
        a.grad += out.grad @ b.values.T
        b.grad += a.values.T @ out.grad
    out._backward = back
    return out


# ---------------------------------------------------------------------------
# elementwise nonlinearities

@_register("relu")
def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = _make(np.maximum(x.values, 0.0), (x,), "relu")

    def back():
        x.grad += out.grad * (x.values > 0.0)
    out._backward = back
    return out


@_register("exp")
def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = _make(np.exp(x.values), (x,), "exp")

    def back():
        x.grad += out.grad * out.values
    out._backward = back
    return out


@_register("log")
def log(x) -> Tensor:
    x = _as_tensor(x)
    out = _make(np.log(x.values), (x,), "log")

    def back():
        x.grad += out.grad / x.values
    out._backward = back
    return out


@_register("sqrt")
def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    out = _make(np.sqrt(x.values), (x,), "sqrt")

    def back():
        x.grad += out.grad * 0.5 / out.values
    out._backward = back
    return out


@_register("softplus")
def softplus(x) -> Tensor:
    """ln(1 + e^x), computed as max(x, 0) + log1p(e^-|x|) to avoid overflow."""
    x = _as_tensor(x)
    v = x.values
    out = _make(np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v))), (x,), "softplus")

    def back():
        x.grad += out.grad * _sigmoid(x.values)
    out._backward = back
    return out


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


@_register("power")
def power(x, exponent) -> Tensor:
    """x ** exponent with the exponent either a constant or a learnable tensor.

    The exponent-gradient path needs x > 0 (it uses ln x); callers that
    learn the exponent clamp their inputs first.
    """
    x = _as_tensor(x)
    if isinstance(exponent, Tensor):
        p = exponent
        out = _make(_broadcast_values("power", x, p, np.power), (x, p), "power")

        def back():
            x.grad += _unbroadcast(
                out.grad * p.values * np.power(x.values, p.values - 1.0), x.shape)
            p.grad += _unbroadcast(out.grad * out.values * np.log(x.values), p.shape)
        out._backward = back
        return out

    c = float(exponent)
    out = _make(np.power(x.values, c), (x,), "power")

    def back():
        x.grad += out.grad * c * np.power(x.values, c - 1.0)
    out._backward = back
    return out


@_register("clamp_min")
def clamp_min(x, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient passes only where x > floor."""
    x = _as_tensor(x)
    out = _make(np.maximum(x.values, floor), (x,), "clamp_min")

    def back():
        x.grad += out.grad * (x.values > floor)
    out._backward = back
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops

@_register("sum")
def tensor_sum(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    out = _make(x.values.sum(axis=axis, keepdims=keepdims), (x,), "sum")

    def back():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.grad += np.broadcast_to(g, x.shape)
    out._backward = back
    return out


@_register("mean")
def tensor_mean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    count = x.values.size if axis is None else x.shape[axis]
    return multiply(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


@_register("reshape")
def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        v = x.values.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    out = _make(v, (x,), "reshape")

    def back():
        x.grad += out.grad.reshape(x.shape)
    out._backward = back
    return out


@_register("transpose")
def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d tensor, got shape {x.shape}")
    out = _make(x.values.T.copy(), (x,), "transpose")

    def back():
        x.grad += out.grad.T
    out._backward = back
    return out


@_register("concat")
def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        v = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in ts]
        raise ShapeError(f"concat: incompatible shapes {shapes}") from exc
    out = Tensor(v, requires_grad=any(t.requires_grad for t in ts),
                 parents=tuple(ts), op_kind="concat")

    offsets = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back():
        pieces = np.split(out.grad, offsets, axis=axis)
        for t, g in zip(ts, pieces):
            t.grad += g
    out._backward = back
    return out


@_register("gather")
def gather(x, idx) -> Tensor:
    """Indexing with gradient scatter-add back into the source."""
    x = _as_tensor(x)
    out = _make(np.array(x.values[idx], dtype=np.float64), (x,), "gather")

    def back():
        np.add.at(x.grad, idx, out.grad)
    out._backward = back
    return out


# ---------------------------------------------------------------------------
# composite row ops

@_register("softmax")
def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (x,), "softmax")

    def back():
        g = out.grad
        dot = (g * y).sum(axis=axis, keepdims=True)
        x.grad += y * (g - dot)
    out._backward = back
    return out


@_register("l2_normalize")
def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    Zero slices are returned as zeros (with a warning) rather than NaN;
    their gradient is also zeroed.
    """
    x = _as_tensor(x)
    norms = np.sqrt((x.values * x.values).sum(axis=axis, keepdims=True))
    degenerate = norms == 0.0
    if degenerate.any():
        warnings.warn("l2_normalize: zero-norm input slice, returning zeros",
                      RuntimeWarning, stacklevel=2)
    safe = np.where(degenerate, 1.0, norms)
    y = x.values / safe
    out = _make(y, (x,), "l2_normalize")

    def back():
        g = out.grad
        dot = (g * y).sum(axis=axis, keepdims=True)
        gx = (g - y * dot) / safe
        if degenerate.any():
            gx = np.where(degenerate, 0.0, gx)
        x.grad += gx
    out._backward = back
    return out


# ---------------------------------------------------------------------------
# backward pass

def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(leaf) into every reachable leaf's grad.

    Returns a map from ``id(leaf)`` to a gradient copy for leaves with
    ``requires_grad``.  Root must hold a single element.
    """
    if root.values.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    root.grad = np.ones_like(root.values)
    for node in reversed(order):
        if node._backward is not None and node.requires_grad:
            node._backward()
    return {id(n): n.grad.copy() for n in order
            if n.is_leaf() and n.requires_grad}


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients to central differences."""
    per_leaf_max_rel_error: dict[str, float]
    max_rel_error: float
    passed: bool
    step: float
    tolerance: float
    note: str = ""


def finite_diff_check(f: Callable[..., Tensor], leaves: Sequence[Tensor],
                      h: float = 1e-5, tol: float = 1e-4,
                      names: Sequence[str] | None = None) -> GradCheckReport:
    """Check d f / d leaf against (f(x+h) - f(x-h)) / 2h per coordinate.

    ``f`` must be deterministic and rebuild its graph from the leaves'
    current values on every call.  Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    if names is None:
        names = [f"leaf{i}" for i in range(len(leaves))]
    zero_grads(leaves)
    out = f(*leaves)
    if out.values.size != 1:
        raise ValueError("finite_diff_check: f must return a scalar tensor")
    if not np.isfinite(out.values).all():
        return GradCheckReport({n: float("inf") for n in names}, float("inf"),
                               False, h, tol, note="non-finite function value")
    backward(out)
    analytic = [t.grad.copy() for t in leaves]

    per_leaf: dict[str, float] = {}
    worst = 0.0
    note = ""
    for name, leaf, grads in zip(names, leaves, analytic):
        flat = leaf.values.reshape(-1)
        aflat = grads.reshape(-1)
        leaf_worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(*leaves).item()
            flat[i] = orig - h
            f_minus = f(*leaves).item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                per_leaf[name] = float("inf")
                return GradCheckReport(per_leaf, float("inf"), False, h, tol,
                                       note=f"non-finite value perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            leaf_worst = max(leaf_worst, abs(aflat[i] - numeric) / denom)
        per_leaf[name] = leaf_worst
        worst = max(worst, leaf_worst)
    return GradCheckReport(per_leaf, worst, worst <= tol, h, tol, note=note)
