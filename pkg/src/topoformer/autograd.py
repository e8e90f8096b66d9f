"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation executed while gradients are enabled appends a
node to the active :class:`Tape`.  ``backward`` walks that tape in exact
reverse recording order, which is a valid reverse topological order because
an operation's inputs always exist before it runs.

A thread gets its own default tape; training code opens a fresh ``Tape()``
per step so the graph is dropped with it.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def current_tape() -> "Tape":
    """Innermost entered tape, or this thread's default tape."""
    stack = _stack()
    if stack:
        return stack[-1]
    default = getattr(_local, "default_tape", None)
    if default is None:
        default = _local.default_tape = Tape()
    return default


@contextmanager
def no_grad():
    """Run operations without recording them (evaluation, finite differences)."""
    previous = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class _Node:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op, out, parents, backward):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Usable as a context manager; operations inside the ``with`` block are
    recorded here instead of on the thread default tape.  The default tape
    keeps growing until ``current_tape().reset()``, so training loops should
    record on their own tape per step.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tapes must be exited in the order they were entered")
        stack.pop()

    @property
    def ops(self) -> list[str]:
        return [node.op for node in self.nodes]

    def reset(self) -> None:
        self.nodes.clear()

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable t.

        Gradients add onto whatever ``grad`` already holds; call
        :func:`zero_grads` between independent steps.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes and not loss.requires_grad:
            raise ContractError("backward called on an empty tape")
        pending = {id(loss): (loss, np.ones_like(loss.data))}
        for node in reversed(self.nodes):
            entry = pending.pop(id(node.out), None)
            if entry is None:
                continue
            out, g = entry
            out.grad = g if out.grad is None else out.grad + g
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = (parent, pending[key][1] + pg)
                else:
                    pending[key] = (parent, pg)
        # what remains are leaves
        for t, g in pending.values():
            t.grad = g if t.grad is None else t.grad + g


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, data: np.ndarray, parents: tuple, backward: Callable) -> "Tensor":
    needs_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, needs_grad)
    if needs_grad:
        tape = current_tape()
        tape.nodes.append(_Node(op, out, parents, backward))
        out._tape = tape
    return out


def record_op(op: str, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
    """Wrap a custom computation as a tape operation.

    ``backward(g)`` must return one gradient (or None) per parent, each with
    the parent's shape.
    """
    return _record(op, np.asarray(data, dtype=np.float64), tuple(parents), backward)


class Tensor:
    """n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._tape is None:
            raise ContractError("loss was not produced by a recorded operation (tape empty)")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("division is only supported by a constant")
        return scale(self, 1.0 / c)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def backward(loss: Tensor) -> None:
    loss.backward()


# ---------------------------------------------------------------------------
# broadcasting elementwise ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _record(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    return _record("power", x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp of -|z| never overflows; pick the matching form per sign
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at 0."""
    s = np.sign(x.data)
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * s,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _check_axis(x: Tensor, axis) -> tuple[int, ...] | None:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    if any(not -x.ndim <= a < x.ndim for a in axes):
        raise DimensionError(f"axis {axis} is invalid for shape {x.shape}")
    normalized = tuple(int(a) % x.ndim for a in axes)
    if len(set(normalized)) != len(normalized):
        raise DimensionError(f"repeated axis in {axis}")
    return normalized


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _check_axis(x, axis)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", np.asarray(out), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _check_axis(x, axis)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _record("mean", np.asarray(out), (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 axes, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)) or len(axes) != x.ndim:
        raise DimensionError(f"axes {axes} are not a permutation for shape {x.shape}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along axis {axis} failed for shapes {shapes}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tuple(tensors), back)


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None for k in parts)


def getitem(x: Tensor, key) -> Tensor:
    """Indexing/slicing; negative steps give reversal."""
    try:
        out = x.data[key]
    except IndexError as exc:
        raise DimensionError(f"index {key!r} invalid for shape {x.shape}: {exc}") from None
    basic = _is_basic_key(key)

    def back(g):
        full = np.zeros(x.shape)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _record("slice", np.array(out, dtype=np.float64), (x,), back)


slice_ = getitem


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), back)


def unfold1d(x: np.ndarray, k: int) -> np.ndarray:
    """[..., C, L] -> [..., C*k, L] zero-padded sliding windows (same padding)."""
    pad = k // 2
    length = x.shape[-1]
    xp = np.zeros(x.shape[:-1] + (length + 2 * pad,))
    xp[..., pad:pad + length] = x
    cols = np.lib.stride_tricks.sliding_window_view(xp, length, axis=-1)
    return cols.reshape(x.shape[:-2] + (x.shape[-2] * k, length))


def fold1d(cols: np.ndarray, channels: int, k: int) -> np.ndarray:
    """Adjoint of :func:`unfold1d`."""
    pad = k // 2
    length = cols.shape[-1]
    lead = cols.shape[:-2]
    cols = cols.reshape(lead + (channels, k, length))
    xp = np.zeros(lead + (channels, length + 2 * pad))
    for j in range(k):
        xp[..., j:j + length] += cols[..., j, :]
    return xp[..., pad:pad + length]


def conv_weight_grad(g: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sum over leading axes and positions of g[..., O, L] cols[..., Ck, L]^T -> [O, Ck]."""
    out_ch, ck = g.shape[-2], cols.shape[-2]
    g2 = np.moveaxis(g, -2, 0).reshape(out_ch, -1)
    c2 = np.moveaxis(cols, -2, 0).reshape(ck, -1)
    return g2 @ c2.T


def check_conv_kernel(kernel_shape: tuple[int, ...]) -> None:
    if len(kernel_shape) != 3:
        raise DimensionError(f"conv kernel must be [out, in, k], got {kernel_shape}")
    if kernel_shape[2] % 2 == 0:
        raise ConfigurationError(f"conv kernel width must be odd, got {kernel_shape[2]}")


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 1-D cross-correlation: [..., C_in, L] -> [..., C_out, L]."""
    check_conv_kernel(kernel.shape)
    out_ch, in_ch, k = kernel.shape
    if x.ndim < 2 or x.shape[-2] != in_ch:
        raise DimensionError(f"conv1d: input {x.shape} does not match kernel {kernel.shape}")
    if bias is not None and bias.shape != (out_ch,):
        raise DimensionError(f"conv1d: bias {bias.shape} does not match kernel {kernel.shape}")
    cols = unfold1d(x.data, k)
    w2 = kernel.data.reshape(out_ch, in_ch * k)
    out = np.matmul(w2, cols)
    if bias is not None:
        out = out + bias.data[:, None]

    def back(g):
        gx = fold1d(np.matmul(w2.T, g), in_ch, k)
        gw = conv_weight_grad(g, cols).reshape(kernel.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=tuple(range(g.ndim - 2)) + (g.ndim - 1,)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv1d", out, parents, back)


def max_pool1d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pooling over the last axis; a trailing remainder is dropped."""
    length = x.shape[-1]
    n = length // size
    if n < 1:
        raise DimensionError(f"max_pool1d: window {size} exceeds length {length}")
    windows = x.data[..., : n * size].reshape(x.shape[:-1] + (n, size))
    idx = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def back(g):
        gw = np.zeros(windows.shape)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        full = np.zeros(x.shape)
        full[..., : n * size] = gw.reshape(x.shape[:-1] + (n * size,))
        return (full,)

    return _record("max_pool1d", out, (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _check_axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _record("softmax", y, (x,), back)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    """Per-element comparison of autodiff and central-difference gradients.

    ``errors[i]`` has the shape of input ``i``; unchecked elements are NaN.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """

    errors: list[np.ndarray]
    tolerance: float
    failures: list[tuple[int, tuple[int, ...], float, float, float]] = field(default_factory=list)

    @property
    def max_relative_error(self) -> float:
        checked = [e[~np.isnan(e)] for e in self.errors]
        checked = [c for c in checked if c.size]
        return float(max(c.max() for c in checked)) if checked else 0.0

    @property
    def checked_elements(self) -> int:
        return int(sum((~np.isnan(e)).sum() for e in self.errors))

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-6,
    tolerance: float = 1e-4,
    floor: float = 1e-3,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``f``'s autodiff gradient against central differences.

    ``f(*inputs)`` must return a scalar tensor.  Only inputs with
    ``requires_grad`` are checked; their ``grad`` is overwritten.  With
    ``max_elements`` set, larger inputs are checked on a seeded random
    subset of that many elements.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    inputs = list(inputs)
    zero_grads(inputs)
    with Tape() as tape:
        loss = f(*inputs)
        tape.backward(loss)
    analytic = [None if t.grad is None else np.array(t.grad) for t in inputs]
    rng = np.random.default_rng(seed)
    report = GradCheckReport(errors=[], tolerance=tolerance)
    for i, t in enumerate(inputs):
        err = np.full(t.shape, np.nan)
        report.errors.append(err)
        if not t.requires_grad:
            continue
        grad = analytic[i] if analytic[i] is not None else np.zeros(t.shape)
        flat_idx = np.arange(t.size)
        if max_elements is not None and t.size > max_elements:
            flat_idx = np.sort(rng.choice(t.size, size=max_elements, replace=False))
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        for j in flat_idx:
            orig = flat[j]
            flat[j] = orig + step
            with no_grad():
                fp = f(*inputs).item()
            flat[j] = orig - step
            with no_grad():
                fm = f(*inputs).item()
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = grad.reshape(-1)[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            err.reshape(-1)[j] = rel
            if not rel < tolerance:
                idx = tuple(int(v) for v in np.unravel_index(j, t.shape))
                report.failures.append((i, idx, float(a), float(numeric), float(rel)))
    return report
