"""Dense float64 tensors with tape-based reverse-mode differentiation.

numpy supplies storage and the inner array arithmetic; every derivative
rule lives here. Ops record a backward closure onto the innermost active
Tape (a plain thread-local stack, so concurrent forwards on separate
tapes never interleave). `backward` replays the tape in reverse; records
are appended in execution order, so reverse order is a valid adjoint
schedule.

All op outputs are checked for NaN/Inf and raise NumericError, which the
training loop turns into a diagnostic naming the offending window.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class ConfigError(ValueError):
    """Bad structural argument (even kernel width, invalid padding, ...)."""


class NumericError(ArithmeticError):
    """A forward produced NaN or Inf."""


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus an accumulated gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, delta: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += delta

    def detach(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all real work happens in the module-level ops
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

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered record of executed ops. Use as a context manager."""

    def __init__(self):
        self._records = []  # (op name, output tensor, backward closure)

    def __len__(self):
        return len(self._records)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def record(self, name, out, backward_fn) -> None:
        self._records.append((name, out, backward_fn))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, *inputs: Tensor) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError("op produced non-finite values")
    grad_needed = any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=grad_needed)


def _record(name: str, out: Tensor, backward_fn) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(name, out, backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate .grad on every requires_grad leaf reachable from `loss`.

    Adjoints for intermediates live in a scratch map keyed by id; whatever
    remains after the replay belongs to leaves and is accumulated into
    .grad, so repeated calls accumulate unless grads are cleared.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    adjoints: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones_like(loss.data))
    }

    def accum(t: Tensor, delta: np.ndarray) -> None:
        if not t.requires_grad:
            return
        key = id(t)
        if key in adjoints:
            adjoints[key][1].__iadd__(delta)
        else:
            adjoints[key] = (t, np.array(delta, dtype=np.float64, copy=True))

    for name, out, backward_fn in reversed(tape._records):
        entry = adjoints.pop(id(out), None)
        if entry is None:
            continue
        backward_fn(entry[1], accum)

    for t, g in adjoints.values():
        t.accumulate_grad(g)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data + b.data, a, b)

    def bwd(g, accum):
        accum(a, _unbroadcast(g, a.shape))
        accum(b, _unbroadcast(g, b.shape))

    _record("add", out, bwd)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data - b.data, a, b)

    def bwd(g, accum):
        accum(a, _unbroadcast(g, a.shape))
        accum(b, _unbroadcast(-g, b.shape))

    _record("sub", out, bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data * b.data, a, b)

    def bwd(g, accum):
        accum(a, _unbroadcast(g * b.data, a.shape))
        accum(b, _unbroadcast(g * a.data, b.shape))

    _record("mul", out, bwd)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _result(a.data / b.data, a, b)

    def bwd(g, accum):
        accum(a, _unbroadcast(g / b.data, a.shape))
        accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    _record("div", out, bwd)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        val = np.exp(a.data)
    out = _result(val, a)

    def bwd(g, accum):
        accum(a, g * val)

    _record("exp", out, bwd)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _result(np.log(a.data), a)

    def bwd(g, accum):
        accum(a, g / a.data)

    _record("log", out, bwd)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    val = np.tanh(a.data)
    out = _result(val, a)

    def bwd(g, accum):
        accum(a, g * (1.0 - val * val))

    _record("tanh", out, bwd)
    return out


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp values; gradient passes only where the input was in range."""
    a = as_tensor(a)
    out = _result(np.clip(a.data, lo, hi), a)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask *= a.data >= lo
    if hi is not None:
        mask *= a.data <= hi

    def bwd(g, accum):
        accum(a, g * mask)

    _record("clip", out, bwd)
    return out


def prelu(x, slope) -> Tensor:
    """Parametric ReLU with a learnable scalar slope for the negative part."""
    x, slope = as_tensor(x), as_tensor(slope)
    if slope.size != 1:
        raise ShapeError(f"prelu slope must be scalar, got shape {slope.shape}")
    neg = x.data < 0.0
    out = _result(np.where(neg, slope.data * x.data, x.data), x, slope)

    def bwd(g, accum):
        accum(x, g * np.where(neg, slope.data, 1.0))
        accum(slope, np.sum(g * np.where(neg, x.data, 0.0)).reshape(slope.shape))

    _record("prelu", out, bwd)
    return out


# ---------------------------------------------------------------------------
# reductions and layout


def tensor_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.sum(axis=axis), a)

    def bwd(g, accum):
        if axis is None:
            accum(a, np.full_like(a.data, float(g)))
        else:
            accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    _record("sum", out, bwd)
    return out


def tensor_mean(a) -> Tensor:
    a = as_tensor(a)
    return mul(tensor_sum(a), 1.0 / a.size)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = _result(a.data.reshape(shape), a)

    def bwd(g, accum):
        accum(a, g.reshape(a.shape))

    _record("reshape", out, bwd)
    return out


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = _result(a.data.transpose(axes), a)
    inverse = tuple(np.argsort(axes))

    def bwd(g, accum):
        accum(a, g.transpose(inverse))

    _record("transpose", out, bwd)
    return out


def slice_last(a, start: int, stop: int) -> Tensor:
    """Take channels [start:stop) along the last axis."""
    a = as_tensor(a)
    out = _result(a.data[..., start:stop], a)

    def bwd(g, accum):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        accum(a, full)

    _record("slice_last", out, bwd)
    return out


# ---------------------------------------------------------------------------
# linear-algebra and network ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = _result(a.data @ b.data, a, b)

    def bwd(g, accum):
        accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    _record("matmul", out, bwd)
    return out


def graph_aggregate(adj, x) -> Tensor:
    """Per-step neighborhood mix: out[t, n, :] = sum_m adj[t, n, m] * x[t, m, :]."""
    adj, x = as_tensor(adj), as_tensor(x)
    if adj.ndim != 3 or x.ndim != 3 or adj.shape[:2] != x.shape[:2] \
            or adj.shape[1] != adj.shape[2]:
        raise ShapeError(f"graph_aggregate shapes: adj {adj.shape}, x {x.shape}")
    out = _result(np.einsum("tnm,tmf->tnf", adj.data, x.data), adj, x)

    def bwd(g, accum):
        accum(adj, np.einsum("tnf,tmf->tnm", g, x.data))
        accum(x, np.einsum("tnm,tnf->tmf", adj.data, g))

    _record("graph_aggregate", out, bwd)
    return out


def pointwise_mix(x, w, bias=None) -> Tensor:
    """Channel mix shared across positions: [C_in, T, N] -> [C_out, T, N]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"pointwise_mix shapes: x {x.shape}, w {w.shape}")
    val = np.einsum("oc,ctn->otn", w.data, x.data)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"pointwise_mix bias shape {bias.shape}")
        val = val + bias.data[:, None, None]
        out = _result(val, x, w, bias)
    else:
        out = _result(val, x, w)

    def bwd(g, accum):
        accum(w, np.einsum("otn,ctn->oc", g, x.data))
        accum(x, np.einsum("oc,otn->ctn", w.data, g))
        if bias is not None:
            accum(bias, g.sum(axis=(1, 2)))

    _record("pointwise_mix", out, bwd)
    return out


def conv_time(x, w, bias=None, padding: int = 0) -> Tensor:
    """1-D convolution along the middle axis of [C_in, T, N].

    Kernel extent is 1 across the trailing (pedestrian) axis, so columns
    never mix. Odd kernel widths only; `padding` zeros are added on both
    ends of the T axis.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv_time shapes: x {x.shape}, w {w.shape}")
    c_out, c_in, k = w.shape
    if c_in != x.shape[0]:
        raise ShapeError(f"conv_time channel mismatch: x {x.shape}, w {w.shape}")
    if k % 2 == 0:
        raise ConfigError(f"conv_time kernel width must be odd, got {k}")
    if padding < 0:
        raise ConfigError(f"negative padding {padding}")
    t_in = x.shape[1]
    t_out = t_in + 2 * padding - k + 1
    if t_out < 1:
        raise ConfigError(f"conv_time output length {t_out} < 1")

    xpad = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    # taps[j, c, t, n] = xpad[c, t + j, n]
    taps = np.stack([xpad[:, j:j + t_out, :] for j in range(k)])
    val = np.einsum("ocj,jctn->otn", w.data, taps)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv_time bias shape {bias.shape}")
        val = val + bias.data[:, None, None]
        out = _result(val, x, w, bias)
    else:
        out = _result(val, x, w)

    def bwd(g, accum):
        accum(w, np.einsum("otn,jctn->ocj", g, taps))
        gx = np.zeros_like(xpad)
        for j in range(k):
            gx[:, j:j + t_out, :] += np.einsum("oc,otn->ctn", w.data[:, :, j], g)
        if padding:
            gx = gx[:, padding:-padding, :]
        accum(x, gx)
        if bias is not None:
            accum(bias, g.sum(axis=(1, 2)))

    _record("conv_time", out, bwd)
    return out
