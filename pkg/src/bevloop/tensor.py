"""Dense float64 tensors with a reverse-mode autodiff tape.

The kernel covers exactly what the pipeline needs: matrix products, row
softmax, 2D cross-correlation, pointwise nonlinearities, reductions,
reshape, transpose and concatenation, plus a finite-difference checker
used to validate every gradient path. Recording is thread-local, so
inference can run in worker threads while a single training task owns
the tape; entering ``no_grad()`` skips recording entirely.

Tensors are immutable values. ``Parameter`` is the one mutable leaf: it
owns a persistent gradient buffer that is zero after ``zero_grad()`` and
accumulates additively across uses within one ``backward()``.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

Array = np.ndarray

_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread (inference mode)."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """Immutable dense array, optionally recorded on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        arr = np.array(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor values must be finite")
        arr.flags.writeable = False
        self.data: Array = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        a, b = self, _coerce(other)
        out = a.data + b.data

        def backward(g: Array) -> None:
            _accumulate(a, _unbroadcast(g, a.data.shape))
            _accumulate(b, _unbroadcast(g, b.data.shape))

        return _from_op(out, (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        a, b = self, _coerce(other)
        out = a.data - b.data

        def backward(g: Array) -> None:
            _accumulate(a, _unbroadcast(g, a.data.shape))
            _accumulate(b, _unbroadcast(-g, b.data.shape))

        return _from_op(out, (a, b), backward)

    def __rsub__(self, other) -> "Tensor":
        return _coerce(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        a, b = self, _coerce(other)
        out = a.data * b.data

        def backward(g: Array) -> None:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

        return _from_op(out, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        a, b = self, _coerce(other)
        out = a.data / b.data

        def backward(g: Array) -> None:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return _from_op(out, (a, b), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return _coerce(other).__truediv__(self)

    def __neg__(self) -> "Tensor":
        src = self
        return _from_op(-self.data, (src,), lambda g: _accumulate(src, -g))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- structure ----------------------------------------------------------

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise DimensionError(f"transpose expects a matrix, got shape {self.shape}")
        src = self
        return _from_op(self.data.T, (src,), lambda g: _accumulate(src, g.T))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise DimensionError(f"cannot reshape {self.shape} into {shape}") from None
        src, orig = self, self.data.shape
        return _from_op(out, (src,), lambda g: _accumulate(src, g.reshape(orig)))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = np.asarray(self.data.sum(axis=axis, keepdims=keepdims))
        src = self
        if axis is None:
            axes: tuple[int, ...] = tuple(range(self.data.ndim))
        elif isinstance(axis, int):
            axes = (axis % self.data.ndim,)
        else:
            axes = tuple(a % self.data.ndim for a in axis)

        def backward(g: Array) -> None:
            gg = g
            if not keepdims:
                kept = list(src.data.shape)
                for a in axes:
                    kept[a] = 1
                gg = g.reshape(kept)
            _accumulate(src, np.broadcast_to(gg, src.data.shape))

        return _from_op(out, (src,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = 1
            for a in axes:
                n *= self.data.shape[a % self.data.ndim]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)


class Parameter(Tensor):
    """Trainable tensor with a persistent gradient buffer and an identifier."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        # parameters stay writable: the single training task mutates them
        self.data = np.array(self.data)
        self.name = str(name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, values) -> None:
        arr = np.asarray(values, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise DimensionError(
                f"parameter {self.name!r}: cannot assign shape {arr.shape} over {self.data.shape}"
            )
        self.data = np.array(arr)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def uniform_init(shape, fan_in: int, rng: np.random.Generator) -> Array:
    """Weight init: uniform in [-s, s] with s = 1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def he_init(shape, fan_in: int, rng: np.random.Generator) -> Array:
    """Weight init for ReLU-fed layers: normal with std = sqrt(2/fan_in).

    The variance-preserving scale matters here: the descriptor pools
    residuals against fixed cluster centers, and activations that decay
    layer by layer would leave those residuals dominated by the centers,
    i.e. nearly input-independent.
    """
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# -- tape internals ----------------------------------------------------------


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _from_op(data: Array, parents: tuple[Tensor, ...], backward: Callable[[Array], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data)
    data.flags.writeable = False
    out.data = data
    out.grad = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = parents if needs else ()
    out._backward = backward if needs else None
    return out


def _accumulate(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros(t.data.shape, dtype=np.float64)
    t.grad += g


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate gradients of every tensor reachable from a scalar loss.

    Parameters not on the loss's tape keep whatever their gradient buffer
    already holds (zero after a reset).
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- operations ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix times matrix or matrix times vector."""
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise DimensionError(
            f"matmul supports matrix x matrix or matrix x vector, got shapes {a.shape} and {b.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward_fn(g: Array) -> None:
        if b.data.ndim == 1:
            if a.requires_grad:
                _accumulate(a, np.outer(g, b.data))
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)
        else:
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)

    return _from_op(np.asarray(out), (a, b), backward_fn)


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a matrix, stabilized by row-max subtraction."""
    x = _coerce(x)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ContractError("softmax_rows requires finite input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g: Array, y: Array = out) -> None:
        dot = (g * y).sum(axis=1, keepdims=True)
        _accumulate(x, y * (g - dot))

    return _from_op(out, (x,), backward_fn)


def relu(x) -> Tensor:
    x = _coerce(x)
    src = x
    out = np.maximum(x.data, 0.0)
    return _from_op(out, (src,), lambda g: _accumulate(src, g * (src.data > 0)))


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward_fn(g: Array, y: Array = out) -> None:
        _accumulate(x, g * y * (1.0 - y))

    return _from_op(out, (x,), backward_fn)


def sqrt(x) -> Tensor:
    x = _coerce(x)
    if np.any(x.data < 0):
        raise ContractError("sqrt domain is non-negative values")
    out = np.sqrt(x.data)

    def backward_fn(g: Array, y: Array = out) -> None:
        _accumulate(x, g * 0.5 / y)

    return _from_op(out, (x,), backward_fn)


def elementwise(x, fn: str) -> Tensor:
    """Apply a named pointwise nonlinearity, one of 'relu' or 'sigmoid'."""
    if fn == "relu":
        return relu(x)
    if fn == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown elementwise function {fn!r}; expected 'relu' or 'sigmoid'")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    offsets = np.cumsum([t.data.shape[axis] for t in ts])[:-1]

    def backward_fn(g: Array) -> None:
        for t, piece in zip(ts, np.split(g, offsets, axis=axis)):
            _accumulate(t, piece)

    return _from_op(out, tuple(ts), backward_fn)


def conv2d(x, filters, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of a [C_in, H, W] input with [C_out, C_in, kh, kw] filters."""
    x, w = _coerce(x), _coerce(filters)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects input [C,H,W] and filters [O,C,kh,kw], got shapes {x.shape} and {w.shape}"
        )
    if w.data.shape[1] != x.data.shape[0]:
        raise DimensionError(f"conv2d: filter shape {w.shape} does not match input shape {x.shape}")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d needs stride >= 1 and padding >= 0")
    b = _coerce(bias) if bias is not None else None
    if b is not None and b.data.shape != (w.data.shape[0],):
        raise DimensionError(f"conv2d: bias shape {b.shape} does not match filter shape {w.shape}")
    _, h, wd = x.data.shape
    c_out, _, kh, kw = w.data.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((c_out, h_out, w_out))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
            out += np.tensordot(w.data[:, :, i, j], patch, axes=(1, 0))
    if b is not None:
        out += b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward_fn(g: Array) -> None:
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                        np.tensordot(w.data[:, :, i, j], g, axes=(0, 0))
                    )
            _accumulate(x, dxp[:, padding : padding + h, padding : padding + wd])
        if w.requires_grad:
            dw = np.zeros(w.data.shape)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
                    dw[:, :, i, j] = np.tensordot(g, patch, axes=([1, 2], [1, 2]))
            _accumulate(w, dw)
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(1, 2)))

    return _from_op(out, parents, backward_fn)


def mlp_forward(x, layers: Sequence[tuple], activation: str = "relu") -> Tensor:
    """Affine chain with the activation between layers and none after the last.

    ``layers`` is a sequence of (weight, bias) pairs; biases may be None.
    A matrix input is treated as one column vector per position.
    """
    if activation != "relu":
        raise ContractError(f"unsupported activation {activation!r}; only 'relu' is available")
    if not layers:
        raise ContractError("mlp_forward needs at least one layer")
    h = _coerce(x)
    for idx, (w, b) in enumerate(layers):
        w = _coerce(w)
        if w.data.ndim != 2 or w.data.shape[1] != h.data.shape[0]:
            raise DimensionError(
                f"mlp_forward: layer {idx} weight shape {w.shape} does not chain with input shape {h.shape}"
            )
        h = matmul(w, h)
        if b is not None:
            b = _coerce(b)
            h = h + (b.reshape(-1, 1) if h.data.ndim == 2 else b)
        if idx < len(layers) - 1:
            h = relu(h)
    return h


def bce_with_logits(logits, targets) -> Tensor:
    """Per-element binary cross-entropy on raw scores, computed stably."""
    z, t = _coerce(logits), _coerce(targets)
    if z.data.shape != t.data.shape:
        raise DimensionError(f"bce_with_logits: shapes {z.shape} and {t.shape} differ")
    zd = z.data
    out = np.maximum(zd, 0.0) - zd * t.data + np.log1p(np.exp(-np.abs(zd)))

    def backward_fn(g: Array) -> None:
        if z.requires_grad:
            e = np.exp(-np.abs(zd))
            s = np.where(zd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
            _accumulate(z, g * (s - t.data))
        if t.requires_grad:
            _accumulate(t, g * (-zd))

    return _from_op(out, (z, t), backward_fn)


# -- gradient verification -----------------------------------------------------


@dataclass(frozen=True)
class GradCheckEntry:
    parameter: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    """Worst relative disagreement between backward() and central differences."""

    max_rel_error: float
    tolerance: float
    n_coordinates: int
    worst: list[GradCheckEntry]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"max rel error {self.max_rel_error:.3e} over {self.n_coordinates} coordinates "
            f"(tolerance {self.tolerance:.1e}): {status}"
        ]
        for e in self.worst:
            lines.append(
                f"  {e.parameter}{list(e.index)}: analytic={e.analytic:.6e} "
                f"numeric={e.numeric:.6e} rel={e.rel_error:.3e}"
            )
        return "\n".join(lines)


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    track_worst: int = 5,
) -> GradCheckReport:
    """Compare backward() gradients against central differences, coordinate by coordinate.

    ``loss_fn`` must be a pure function of ``params`` returning a scalar tensor.
    """
    if not (1e-7 <= epsilon <= 1e-4):
        raise ContractError(f"epsilon {epsilon} outside the trustworthy range [1e-7, 1e-4]")
    params = list(params)
    zero_grads(params)
    backward(loss_fn())
    analytic = [np.array(p.grad) for p in params]
    entries: list[GradCheckEntry] = []
    with no_grad():
        for p, an in zip(params, analytic):
            flat = p.data.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                up = loss_fn().item()
                flat[i] = orig - epsilon
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * epsilon)
                a = float(an_flat[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                index = tuple(int(v) for v in np.unravel_index(i, p.data.shape))
                entries.append(GradCheckEntry(p.name, index, a, numeric, rel))
    entries.sort(key=lambda e: e.rel_error, reverse=True)
    worst = entries[:track_worst]
    max_rel = worst[0].rel_error if worst else 0.0
    return GradCheckReport(max_rel, tolerance, len(entries), worst)
