"""
Numerics - Tape-based reverse-mode autodiff over float64 NumPy arrays
Every primitive records (inputs, output, vjp) on the calling thread's active tape
when any input requires grad. One backward consumes the tape.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from core.errors import ConfigurationError, NumericFault, TapeError, UsageError

logger = logging.getLogger(__name__)

DTYPE = np.float64
GELU_C = np.sqrt(2.0 / np.pi)


class Tensor:
    """
    n-dimensional float64 array that can take part in the gradient tape.
    Leaf tensors (created by the user) receive .grad after backward;
    op outputs only carry gradients internally.
    """
    __slots__ = ("values", "requires_grad", "grad", "name", "_tape", "_is_leaf")
    # ndarray <op> Tensor falls through to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.array(values, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None
        self._is_leaf = True

    @classmethod
    def _wrap(cls, values):
        out = cls.__new__(cls)
        out.values = np.asarray(values, dtype=DTYPE)
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._tape = None
        out._is_leaf = True
        return out

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise UsageError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self):
        return self.values

    def detach(self):
        return Tensor(self.values)

    def zero_grad(self):
        self.grad = None

    def is_finite(self):
        ok = bool(np.all(np.isfinite(self.values)))
        if self.grad is not None:
            ok = ok and bool(np.all(np.isfinite(self.grad)))
        return ok

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of primitive applications; inputs always precede their consumers"""

    def __init__(self):
        self.entries = []
        self.consumed = False

    def record(self, entry):
        if self.consumed:
            raise TapeError("cannot record on a consumed tape - start a new forward pass")
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)


_local = threading.local()


def _state():
    if not hasattr(_local, "tape"):
        _local.tape = Tape()
        _local.enabled = True
    return _local


def active_tape():
    return _state().tape


@contextmanager
def recording(tape=None):
    """Route ops recorded inside the block to a fresh (or given) tape"""
    state = _state()
    previous = state.tape
    state.tape = tape if tape is not None else Tape()
    try:
        yield state.tape
    finally:
        state.tape = previous


@contextmanager
def no_grad():
    """Disable recording; ops return plain constant tensors"""
    state = _state()
    previous = state.enabled
    state.enabled = False
    try:
        yield
    finally:
        state.enabled = previous


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=DTYPE))


def _make(op, inputs, values, vjp):
    if not np.all(np.isfinite(values)):
        raise NumericFault(f"non-finite value produced by {op}")
    out = Tensor._wrap(values)
    state = _state()
    if state.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_leaf = False
        state.tape.record(TapeEntry(op, tuple(inputs), out, vjp))
        out._tape = state.tape
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _make("add", (a, b), a.values + b.values, lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make("sub", (a, b), a.values - b.values, lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    av, bv = a.values, b.values
    return _make("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    av, bv = a.values, b.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _make("div", (a, b), out, lambda g: (g / bv, -g * av / (bv * bv)))


def neg(a):
    a = as_tensor(a)
    return _make("neg", (a,), -a.values, lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.values)
    return _make("exp", (a,), y, lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    x = a.values
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _make("log", (a,), y, lambda g: (g / x,))


def sqrt(a):
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        y = np.sqrt(a.values)
    return _make("sqrt", (a,), y, lambda g: (g * 0.5 / y,))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.values)
    return _make("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    a = as_tensor(a)
    y = expit(a.values)
    return _make("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def softplus(a):
    """log(1 + exp(x)), stable for large |x|"""
    a = as_tensor(a)
    x = a.values
    return _make("softplus", (a,), np.logaddexp(0.0, x), lambda g: (g * expit(x),))


def gelu(a):
    """tanh approximation of GELU"""
    a = as_tensor(a)
    x = a.values
    t = np.tanh(GELU_C * (x + 0.044715 * x ** 3))
    y = 0.5 * x * (1.0 + t)

    def vjp(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make("gelu", (a,), y, vjp)


# ---------------------------------------------------------------- reductions / shape

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make("sum", (a,), out, vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    original = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ConfigurationError(f"reshape: cannot view {original} as {shape}")
    return _make("reshape", (a,), out, lambda g: (g.reshape(original),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make("transpose", (a,), a.values.transpose(axes), lambda g: (g.transpose(inverse),))


# ---------------------------------------------------------------- linear algebra / nn

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ConfigurationError(f"matmul needs operands of rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _make("matmul", (a, b), av @ bv, vjp)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", (a,), y, vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalization over the last axis followed by an affine map"""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ConfigurationError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} "
                                 f"do not match feature size {x.shape[-1]}")
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(xv.var(axis=-1, keepdims=True) + eps)
    xhat = (xv - mu) * inv_std
    gv = gain.values
    n = xv.shape[-1]

    def vjp(g):
        gx_hat = g * gv
        dx = inv_std / n * (n * gx_hat
                            - gx_hat.sum(axis=-1, keepdims=True)
                            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return dx, g * xhat, g

    return _make("layer_norm", (x, gain, bias), xhat * gv + bias.values, vjp)


def embedding(table, ids):
    """Row gather; ids is an integer array of any shape"""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ConfigurationError(f"embedding ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ConfigurationError(f"embedding ids outside [0, {table.shape[0]})")
    rows = table.shape

    def vjp(g):
        grad = np.zeros(rows, dtype=DTYPE)
        np.add.at(grad, ids, g)
        return (grad,)

    return _make("embedding", (table,), table.values[ids], vjp)


def masked_cross_entropy(logits, targets, mask):
    """
    Mean next-token NLL over positions where mask is set.
    logits (..., V), targets (...) integer ids, mask (...) boolean.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ConfigurationError(f"cross-entropy: logits {logits.shape}, targets {targets.shape}, "
                                 f"mask {mask.shape} disagree")
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ConfigurationError(f"cross-entropy targets outside [0, {vocab})")
    count = int(mask.sum())
    if count == 0:
        raise UsageError("cross-entropy mask selects no positions")
    lv = logits.values
    lse = logsumexp(lv, axis=-1)
    picked = np.take_along_axis(lv, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    loss = float((nll * mask).sum() / count)

    def vjp(g):
        probs = np.exp(lv - lse[..., None])
        np.put_along_axis(probs, targets[..., None],
                          np.take_along_axis(probs, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (probs * (mask / count)[..., None] * g,)

    return _make("masked_cross_entropy", (logits,), np.asarray(loss), vjp)


# ---------------------------------------------------------------- backward

def backward(loss):
    """
    Populate .grad on every requires_grad leaf reachable from a scalar loss.
    The tape is consumed: a second call without a new forward raises TapeError.
    """
    loss = as_tensor(loss)
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.values)):
        raise NumericFault("loss is not finite")

    tape = loss._tape
    if tape is None:
        if loss.requires_grad and loss._is_leaf:
            loss.grad = np.ones_like(loss.values)
            return
        raise UsageError("loss is not on a tape - nothing upstream requires grad")
    if tape.consumed:
        raise TapeError("tape already consumed - re-run forward before calling backward again")

    pending = {id(loss): np.ones_like(loss.values)}
    for entry in reversed(tape.entries):
        upstream = pending.pop(id(entry.output), None)
        if upstream is None:
            continue
        for inp, grad in zip(entry.inputs, entry.vjp(upstream)):
            if grad is None or not inp.requires_grad:
                continue
            grad = _unbroadcast(np.asarray(grad, dtype=DTYPE), inp.values.shape)
            if not np.all(np.isfinite(grad)):
                raise NumericFault(f"non-finite gradient flowing out of {entry.op}")
            if inp._is_leaf:
                inp.grad = np.array(grad) if inp.grad is None else inp.grad + grad
            else:
                key = id(inp)
                pending[key] = grad if key not in pending else pending[key] + grad

    tape.consumed = True
    tape.entries.clear()
    state = _state()
    if state.tape is tape:
        state.tape = Tape()


def gradcheck(fn, inputs, eps=1e-5):
    """
    Compare backward() against central finite differences.
    fn maps the input tensors to a scalar tensor. Returns the worst
    relative error ||analytic - numeric|| / max(||analytic||, ||numeric||).
    """
    for t in inputs:
        t.grad = None
    with recording():
        out = fn(*inputs)
        backward(out)

    worst = 0.0
    with no_grad():
        for t in inputs:
            if not t.requires_grad:
                continue
            analytic = t.grad if t.grad is not None else np.zeros_like(t.values)
            numeric = np.zeros_like(t.values)
            for idx in np.ndindex(t.values.shape):
                original = t.values[idx]
                t.values[idx] = original + eps
                plus = fn(*inputs).item()
                t.values[idx] = original - eps
                minus = fn(*inputs).item()
                t.values[idx] = original
                numeric[idx] = (plus - minus) / (2 * eps)
            denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
