"""Dense tensors with tape-based reverse-mode differentiation.

Every operation on a :class:`Tensor` that involves a differentiable input is
appended to the active :class:`Tape` together with its vector-Jacobian
product.  :func:`backward` replays the tape in reverse.  Arrays are plain
numpy buffers; a tensor's ``data`` is never mutated in place by the ops here.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "TapeError",
    "BatchNormState",
    "as_tensor",
    "parameter",
    "backward",
    "no_grad",
    "branch_pattern",
    "BranchPattern",
    "get_tape",
    "set_precision",
    "get_dtype",
    "precision",
    "glorot_uniform",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "transpose",
    "swapaxes",
    "concat",
    "stack",
    "unstack",
    "reshape",
    "tensor_sum",
    "mean",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "log",
    "exp",
    "tensor_abs",
    "sqrt",
    "clamp_min",
    "trace",
    "causal_conv",
    "batch_norm",
]


class NonFiniteError(FloatingPointError):
    """Raised as soon as an operation produces NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the tape (non-scalar loss, repeated backward)."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32


def set_precision(name: str) -> None:
    """Select the global float width, ``"float32"`` or ``"float64"``."""
    global _dtype
    try:
        _dtype = _DTYPES[str(name)]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}") from None


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        set_precision(np.dtype(previous).name)


class Tape:
    """Append-only record of differentiable operations for one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.generation = 0
        self.enabled = True

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], vjp: Callable) -> None:
        out._gen = self.generation
        self.nodes.append((out, parents, vjp))

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


class BranchPattern:
    """Masks chosen by piecewise ops (relu, abs, clamp_min), in call order.

    In record mode each op appends its mask; in replay mode each op reuses the
    stored mask instead of recomputing it, so the forward pass evaluates the
    smooth piece that was active when the pattern was recorded.
    """

    def __init__(self) -> None:
        self.masks: list[np.ndarray] = []
        self.replay = False
        self._cursor = 0

    def take(self, mask: np.ndarray) -> np.ndarray:
        if not self.replay:
            self.masks.append(mask)
            return mask
        if self._cursor >= len(self.masks):
            raise RuntimeError("branch pattern replay ran past the recorded ops")
        stored = self.masks[self._cursor]
        if stored.shape != mask.shape:
            raise RuntimeError("branch pattern replay hit a shape mismatch")
        self._cursor += 1
        return stored

    def rewind(self) -> None:
        self.replay = True
        self._cursor = 0


@contextlib.contextmanager
def branch_pattern(pattern: BranchPattern):
    """Record or replay the branch choices of piecewise ops."""
    previous = getattr(_local, "branches", None)
    _local.branches = pattern
    try:
        yield pattern
    finally:
        _local.branches = previous


def _branch(mask: np.ndarray) -> np.ndarray:
    pattern = getattr(_local, "branches", None)
    return mask if pattern is None else pattern.take(mask)


@contextlib.contextmanager
def no_grad():
    tape = get_tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_gen", "__weakref__")

    # make numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._gen = -1

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
        return float(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _getitem(self, index)

    # convenience methods
    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=_dtype))


def parameter(value, name: str | None = None) -> Tensor:
    """A differentiable leaf in the current precision."""
    return Tensor(np.array(value, dtype=_dtype), requires_grad=True, name=name)


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=tuple(shape))


def _check(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    return data


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    _check(data, op)
    tape = get_tape()
    needs = tape.enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class _SliceGrad:
    """Gradient contribution that lands in a sub-block of the parent."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NonFiniteError("div by zero")
    out_data = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out_data / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out_data, "div", (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("only scalar exponents are supported")
    p = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1),)

    return _make(out_data, "power", (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules (both operands ≥ 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ≥2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), vjp)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, axis1, axis2), "swapaxes", (a,), lambda g: (np.swapaxes(g, axis1, axis2),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        out = []
        for i in range(len(tensors)):
            index = [slice(None)] * g.ndim
            index[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(index)])
        return tuple(out)

    return _make(data, "concat", tensors, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    data = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(data, "stack", tensors, vjp)


def _getitem(a: Tensor, index) -> Tensor:
    if not isinstance(index, tuple):
        index = (index,)
    for part in index:
        if not (part is Ellipsis or part is None or isinstance(part, (int, np.integer, slice))):
            raise TypeError("only basic indexing (ints, slices, ...) is differentiable")
    data = a.data[index]
    return _make(data, "slice", (a,), lambda g: (_SliceGrad(index, g),))


def unstack(a, axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into views; gradients are scattered back in place."""
    a = as_tensor(a)
    ax = axis % a.ndim
    prefix = (slice(None),) * ax
    return [_getitem(a, prefix + (i,)) for i in range(a.shape[ax])]


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), "sum", (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ValueError("mean over an empty axis")
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape),)

    return _make(np.asarray(a.data.mean(axis=axes, keepdims=keepdims)), "mean", (a,), vjp)


def trace(a) -> Tensor:
    """Trace over the last two axes (batched)."""
    a = as_tensor(a)
    n = a.shape[-1]
    if a.shape[-2] != n:
        raise ValueError(f"trace needs square trailing axes, got {a.shape}")
    eye = np.eye(n, dtype=a.data.dtype)

    def vjp(g):
        return (np.asarray(g)[..., None, None] * eye,)

    return _make(np.asarray(np.trace(a.data, axis1=-2, axis2=-1)), "trace", (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = _branch(a.data > 0)
    # subgradient at 0 is 0
    return _make(np.where(mask, a.data, 0).astype(a.data.dtype, copy=False), "relu", (a,), lambda g: (g * mask,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _make(s, "sigmoid", (a,), lambda g: (g * s * (1 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, "tanh", (a,), lambda g: (g * (1 - t * t),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, "softmax", (a,), vjp)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, "log", (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def tensor_abs(a) -> Tensor:
    a = as_tensor(a)
    sign = _branch(np.sign(a.data))
    return _make((sign * a.data).astype(a.data.dtype, copy=False), "abs", (a,), lambda g: (g * sign,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    if np.any(out == 0):
        # derivative undefined at 0; callers floor their inputs first
        def vjp(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                return (np.where(out > 0, g / (2 * np.where(out > 0, out, 1)), 0),)
    else:
        def vjp(g):
            return (g / (2 * out),)

    return _make(out, "sqrt", (a,), vjp)


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    mask = _branch(a.data >= floor)
    return _make(np.where(mask, a.data, floor).astype(a.data.dtype, copy=False), "clamp_min", (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def causal_conv(x, w, dilation: int = 1) -> Tensor:
    """Dilated causal convolution along the last axis.

    ``x`` has shape (N, C_in, V, T); ``w`` has shape (C_out, C_in, K) or
    (C_out, C_in, 1, K).  Each node row is filtered independently and the
    sequence is left-padded with ``(K - 1) * dilation`` zeros, so output
    step ``t`` only sees inputs at ``t, t - d, ..., t - (K-1)d``.
    """
    x, w = as_tensor(x), as_tensor(w)
    wd = w.data
    four_d = wd.ndim == 4
    if four_d:
        if wd.shape[2] != 1:
            raise ValueError("kernel height over the node axis must be 1")
        wd = wd[:, :, 0, :]
    if x.ndim != 4 or wd.ndim != 3 or wd.shape[1] != x.shape[1]:
        raise ValueError(f"causal_conv shape mismatch: x {x.shape}, w {w.shape}")
    if dilation < 1:
        raise ValueError("dilation must be ≥ 1")
    n, c, v, t = x.shape
    o, _, k = wd.shape
    # tap j looks back (k-1-j)*d steps; taps that only ever see padding are skipped
    taps = [j for j in range(k) if (k - 1 - j) * dilation < t]
    shifts = [(k - 1 - j) * dilation for j in taps]
    cols = np.zeros((n, c, len(taps), v, t), dtype=x.data.dtype)
    for i, s in enumerate(shifts):
        cols[:, :, i, :, s:] = x.data[..., : t - s]
    cols = cols.reshape(n, c * len(taps), v * t)
    wmat = np.ascontiguousarray(wd[:, :, taps]).reshape(o, c * len(taps))
    out = (wmat @ cols).reshape(n, o, v, t)

    def vjp(g):
        g2 = np.ascontiguousarray(g).reshape(n, o, v * t)
        gw = gx = None
        if w.requires_grad:
            lhs = g2.transpose(1, 0, 2).reshape(o, n * v * t)
            rhs = cols.transpose(1, 0, 2).reshape(c * len(taps), n * v * t)
            active = (lhs @ rhs.T).reshape(o, c, len(taps))
            gw = np.zeros((o, c, k), dtype=g.dtype)
            gw[:, :, taps] = active
            if four_d:
                gw = gw[:, :, None, :]
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(n, c, len(taps), v, t)
            gx = np.zeros((n, c, v, t), dtype=g.dtype)
            for i, s in enumerate(shifts):
                gx[..., : t - s] += gcols[:, :, i, :, s:]
        return gx, gw

    return _make(out, "causal_conv", (x, w), vjp)


# ---------------------------------------------------------------------------
# batch normalization (composed from the primitives above)
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics for one normalization layer."""

    num_channels: int
    eps: float = 1e-5
    momentum: float = 0.1
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    bypass: bool = field(default=False, repr=False)  # test hook: identity


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization of an (N, C, ...) tensor over all other axes."""
    x = as_tensor(x)
    if state.bypass:
        return x
    c = x.shape[1]
    if c != state.num_channels:
        raise ValueError(f"batch_norm expected {state.num_channels} channels, got {c}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    g = reshape(gamma, bshape)
    b = reshape(beta, bshape)
    if training:
        mu = mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = mean(centered * centered, axis=axes, keepdims=True)
        normed = centered / sqrt(var + state.eps)
        count = x.size // c
        batch_mean = mu.data.reshape(c).astype(np.float64)
        unbiased = var.data.reshape(c).astype(np.float64) * (count / max(count - 1, 1))
        m = state.momentum
        if state.running_mean is None:
            state.running_mean = np.zeros(c)
            state.running_var = np.ones(c)
        state.running_mean = (1 - m) * state.running_mean + m * batch_mean
        state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        if state.running_mean is None:
            raise RuntimeError("batch_norm in eval mode before any training step")
        rm = state.running_mean.astype(x.data.dtype).reshape(bshape)
        rv = state.running_var.astype(x.data.dtype).reshape(bshape)
        normed = (x - rm) / np.sqrt(rv + state.eps).astype(x.data.dtype)
    return normed * g + b


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss) back through the tape.

    Fills ``.grad`` on every differentiable leaf reached and returns a map
    from leaf tensor to gradient.  Leaves listed in ``wrt`` but not reached
    get zero gradients.  The tape is cleared afterwards, so a second call
    for the same forward pass is an error.
    """
    tape = get_tape()
    if loss.size != 1 or loss.ndim != 0:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any differentiable input")
    if loss._gen != tape.generation or not tape.nodes:
        raise TapeError("backward() called twice without a new forward pass")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = set()
    leaves: dict[int, Tensor] = {}

    def accumulate(parent: Tensor, contribution) -> None:
        key = id(parent)
        if isinstance(contribution, _SliceGrad):
            buf = grads.get(key)
            if buf is None:
                buf = np.zeros(parent.shape, dtype=parent.data.dtype)
                grads[key] = buf
                owned.add(key)
            elif key not in owned:
                buf = np.array(buf, dtype=parent.data.dtype)
                grads[key] = buf
                owned.add(key)
            buf[contribution.index] += contribution.value
            return
        prev = grads.get(key)
        if prev is None:
            grads[key] = contribution
        elif key in owned:
            prev += contribution
        else:
            grads[key] = prev + contribution
            owned.add(key)

    for out, parents, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        owned.discard(id(out))
        contributions = vjp(g)
        for parent, contribution in zip(parents, contributions):
            if contribution is None or not parent.requires_grad:
                continue
            accumulate(parent, contribution)
            if parent._gen != tape.generation:
                leaves[id(parent)] = parent

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        grad = np.array(grads[key], dtype=leaf.data.dtype)
        leaf.grad = grad
        result[leaf] = grad
    if wrt is not None:
        for leaf in wrt:
            if leaf not in result:
                leaf.grad = np.zeros_like(leaf.data)
                result[leaf] = leaf.grad
    tape.clear()
    return result
