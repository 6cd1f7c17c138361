"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation in the package is built from the primitives
in this module.  A :class:`Tensor` wraps a numpy array; while a :class:`Tape`
is active, primitives append one record each, and ``Tape.backward`` replays
the records in reverse, accumulating gradients additively across fan-out.

Design constraints honoured here:

- double precision is the default element type (finite-difference checks
  need it); ``float32`` can be selected per tensor or via ``set_default_dtype``
  for faster training runs,
- broadcasting is restricted to leading-axis expansion (a ``(d,)`` bias may
  meet an ``(n, d)`` matrix); anything else requires an explicit
  :func:`expand`,
- gelu uses the tanh approximation with the documented 0.044715 constant so
  oracles are reproducible,
- maxpool breaks ties toward the first element in row-major window order.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_DEFAULT_DTYPE = np.float64

GELU_CUBIC_COEFF = 0.044715
_GELU_SCALE = math.sqrt(2.0 / math.pi)


def set_default_dtype(dtype):
    """Select the element type for newly created tensors (float32/float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported element type {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def active_tape():
    """The innermost active tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Record:
    # Holds strong references to the tensors involved: identity keys stay
    # unambiguous for the lifetime of the tape (a freed tensor's id could
    # otherwise be reused by a later allocation and cross-wire gradients).
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class GradientMap:
    """Gradients produced by one backward pass, keyed by tensor identity."""

    def __init__(self, grads, retain=None):
        self._grads = grads
        self._retain = retain  # keeps recorded tensors alive while keys are held

    def get(self, tensor):
        """Gradient array for ``tensor`` or None if it never received one."""
        return self._grads.get(id(tensor))

    def grad(self, tensor):
        """Gradient for ``tensor``, zero-filled if unreachable from the loss."""
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def __contains__(self, tensor):
        return id(tensor) in self._grads


class Tape:
    """Ordered record of primitive applications on one thread.

    A tape and its tensors are a single-threaded unit of work; independent
    tapes may run concurrently on separate threads (the active-tape stack is
    thread-local).
    """

    def __init__(self):
        self.records = []
        self._on_tape = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def watch(self, tensor):
        """Mark a leaf tensor (parameter/input) as differentiable on this tape."""
        self._on_tape[id(tensor)] = tensor

    def tracks(self, tensor):
        return id(tensor) in self._on_tape

    def record(self, out, inputs, backward_fn):
        """Append one primitive application.

        ``backward_fn(grad_out) -> tuple of grads`` aligned with ``inputs``;
        entries may be None for inputs that take no gradient.
        """
        self.records.append(_Record(out, tuple(inputs), backward_fn))
        self._on_tape[id(out)] = out

    def backward(self, loss):
        """Accumulated gradients of a scalar ``loss`` for every reachable tensor.

        Replays the record list once, in reverse order.  Tensors never
        visited (detached or unreachable) simply have no entry; use
        ``GradientMap.grad`` for zero-filled access.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if not (id(loss) in self._on_tape or loss.requires_grad):
            raise ContractError("loss tensor is not on the active tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            gout = grads.get(id(rec.out))
            if gout is None:
                continue
            gins = rec.backward_fn(gout)
            for t, g in zip(rec.inputs, gins):
                if g is None:
                    continue
                # Detached tensors and plain constants take no gradient.
                if not (id(t) in self._on_tape or t.requires_grad):
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = g if acc is None else acc + g
        return GradientMap(grads, retain=self.records)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    """N-dimensional array participating in the active differentiation tape."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        if self.requires_grad:
            tape = active_tape()
            if tape is not None:
                tape.watch(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        """A view of the same data that never receives a gradient."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # Small operator sugar; all arithmetic routes through the module ops so
    # everything is recorded uniformly.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def zeros(shape, dtype=None):
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE))


def ones(shape, dtype=None):
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE))


def _wants_grad(tape, *tensors):
    # Leaves flagged requires_grad participate even when constructed before
    # the tape existed (parameters are built once, reused across tapes).
    if tape is None:
        return False
    return any(t.requires_grad or tape.tracks(t) for t in tensors)


def _finish(tape, out, inputs, backward_fn, wants):
    if wants:
        tape.record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# Broadcasting policy: leading-axis expansion only
# ---------------------------------------------------------------------------

def _check_leading_broadcast(sa, sb):
    """Validate the restricted broadcast between shapes sa and sb.

    The smaller-rank operand must equal the trailing extents of the larger;
    nothing else broadcasts implicitly.  Returns the output shape.
    """
    if sa == sb:
        return sa
    small, large = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(large) or (small and small != large[len(large) - len(small):]):
        raise DimensionError(
            f"shapes {sa} and {sb} only combine via leading-axis expansion; "
            "use expand() for anything else"
        )
    return large


def _reduce_to_shape(g, shape):
    """Sum gradient g down to ``shape`` (inverse of leading-axis expansion)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_leading_broadcast(a.shape, b.shape)
    tape = active_tape()
    wants = _wants_grad(tape, a, b)
    out = Tensor(a.data + b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to_shape(g, sa), _reduce_to_shape(g, sb)

    return _finish(tape, out, (a, b), backward, wants)


def sub(a, b):
    return add(a, scale(as_tensor(b), -1.0))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_leading_broadcast(a.shape, b.shape)
    tape = active_tape()
    wants = _wants_grad(tape, a, b)
    out = Tensor(a.data * b.data)
    ad, bd, sa, sb = a.data, b.data, a.shape, b.shape

    def backward(g):
        return _reduce_to_shape(g * bd, sa), _reduce_to_shape(g * ad, sb)

    return _finish(tape, out, (a, b), backward, wants)


def scale(a, s):
    a = as_tensor(a)
    s = float(s)
    tape = active_tape()
    wants = _wants_grad(tape, a)
    out = Tensor(a.data * s)

    def backward(g):
        return (g * s,)

    return _finish(tape, out, (a,), backward, wants)


def exp(a):
    a = as_tensor(a)
    tape = active_tape()
    wants = _wants_grad(tape, a)
    y = np.exp(a.data)
    out = Tensor(y)

    def backward(g):
        return (g * y,)

    return _finish(tape, out, (a,), backward, wants)


def log(a):
    a = as_tensor(a)
    tape = active_tape()
    wants = _wants_grad(tape, a)
    out = Tensor(np.log(a.data))
    ad = a.data

    def backward(g):
        return (g / ad,)

    return _finish(tape, out, (a,), backward, wants)


def power(a, p):
    """Elementwise a**p for a constant exponent p."""
    a = as_tensor(a)
    p = float(p)
    tape = active_tape()
    wants = _wants_grad(tape, a)
    out = Tensor(a.data ** p)
    ad = a.data

    def backward(g):
        return (g * p * ad ** (p - 1.0),)

    return _finish(tape, out, (a,), backward, wants)


def sigmoid(a):
    a = as_tensor(a)
    tape = active_tape()
    wants = _wants_grad(tape, a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _finish(tape, out, (a,), backward, wants)


def gelu(a):
    """Gaussian error linear unit, tanh approximation (constant 0.044715)."""
    a = as_tensor(a)
    tape = active_tape()
    wants = _wants_grad(tape, a)
    x = a.data
    inner = _GELU_SCALE * (x + GELU_CUBIC_COEFF * x ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def backward(g):
        dinner = _GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC_COEFF * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
        return (g * d,)

    return _finish(tape, out, (a,), backward, wants)


def expand(a, shape):
    """Explicit broadcast of size-1 axes (and new leading axes) to ``shape``."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"cannot expand {a.shape} to {shape}") from None
    tape = active_tape()
    wants = _wants_grad(tape, a)
    out = Tensor(np.ascontiguousarray(data))
    src_shape = a.shape

    def backward(g):
        extra = len(shape) - len(src_shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, s in enumerate(src_shape) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _finish(tape, out, (a,), backward, wants)


# ---------------------------------------------------------------------------
# Shape movement
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    tape = active_tape()
    wants = _wants_grad(tape, a)
    out = Tensor(a.data.reshape(shape))
    src = a.shape

    def backward(g):
        return (g.reshape(src),)

    return _finish(tape, out, (a,), backward, wants)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    tape = active_tape()
    wants = _wants_grad(tape, a)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _finish(tape, out, (a,), backward, wants)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    tape = active_tape()
    wants = _wants_grad(tape, *tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(pieces)

    return _finish(tape, out, tuple(tensors), backward, wants)


def slice_axis(a, axis, start, stop):
    """Contiguous slice [start:stop) along one axis."""
    a = as_tensor(a)
    tape = active_tape()
    wants = _wants_grad(tape, a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(np.ascontiguousarray(a.data[index]))
    src_shape = a.shape

    def backward(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _finish(tape, out, (a,), backward, wants)


def take_rows(a, ids):
    """Row gather a[ids]; the gradient scatter-adds into the source rows."""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError("take_rows expects a flat index list")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        raise IndexError(
            f"row index out of range: ids in [{ids.min()}, {ids.max()}], "
            f"table has {a.shape[0]} rows"
        )
    tape = active_tape()
    wants = _wants_grad(tape, a)
    out = Tensor(a.data[ids].copy())
    src_shape = a.shape

    def backward(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _finish(tape, out, (a,), backward, wants)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    tape = active_tape()
    wants = _wants_grad(tape, a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    src_shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, src_shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, src_shape).copy(),)

    return _finish(tape, out, (a,), backward, wants)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for i in ax:
            n *= a.shape[i]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product; 2-D, or batched with identical leading extents."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(
            f"matmul batch extents must match exactly: {a.shape} x {b.shape}"
        )
    tape = active_tape()
    wants = _wants_grad(tape, a, b)
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _finish(tape, out, (a, b), backward, wants)


def softmax(x, axis=-1):
    """Normalized exponentials along ``axis``; stabilized by max-subtraction."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    tape = active_tape()
    wants = _wants_grad(tape, x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _finish(tape, out, (x,), backward, wants)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    if not np.isfinite(x.data).all():
        raise NumericError("log_softmax input contains non-finite values")
    tape = active_tape()
    wants = _wants_grad(tape, x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)
    sm = np.exp(y)

    def backward(g):
        gsum = g.sum(axis=axis, keepdims=True)
        return (g - sm * gsum,)

    return _finish(tape, out, (x,), backward, wants)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Zero mean / unit variance over the last axis, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine params must have shape ({d},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    tape = active_tape()
    wants = _wants_grad(tape, x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    gd = gamma.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gx = g * gd
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gx - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _finish(tape, out, (x, gamma, beta), backward, wants)


def bce_with_logits(logits, targets):
    """Mean-free elementwise binary cross-entropy on raw logits.

    ``targets`` is a constant array of the same shape (values in [0, 1]);
    returns the per-element loss, numerically stable for large |logit|.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(
            f"bce targets shape {t.shape} != logits shape {logits.shape}"
        )
    tape = active_tape()
    wants = _wants_grad(tape, logits)
    z = logits.data
    # max(z,0) - z*t + log(1 + exp(-|z|))
    out = Tensor(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z))))

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        return (g * (sig - t),)

    return _finish(tape, out, (logits,), backward, wants)


# ---------------------------------------------------------------------------
# Spatial primitives (single image, channel-first)
# ---------------------------------------------------------------------------

def _conv_out_extent(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of x[C,H,W] with kernel[O,C,kh,kw].

    Zero padding; output extent floor((H+2p-k)/s)+1 per spatial axis.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects x[C,H,W] and kernel[O,C,kh,kw], got {x.shape}, {kernel.shape}"
        )
    c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"kernel channels {kc} != input channels {c}")
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(w, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    tape = active_tape()
    wants = _wants_grad(tape, x, kernel)

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)  # (C*kh*kw, oh*ow)
    wmat = kernel.data.reshape(o, c * kh * kw)
    out = Tensor((wmat @ cols).reshape(o, oh, ow))
    padded_shape = xp.shape

    def backward(g):
        gmat = g.reshape(o, oh * ow)
        gk = (gmat @ cols.T).reshape(o, c, kh, kw)
        gcols = wmat.T @ gmat
        gxp = _col2im(gcols, padded_shape, kh, kw, stride, oh, ow)
        if padding:
            gx = gxp[:, padding:-padding, padding:-padding]
        else:
            gx = gxp
        return np.ascontiguousarray(gx), gk

    return _finish(tape, out, (x, kernel), backward, wants)


def _im2col(xp, kh, kw, stride, oh, ow):
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            cols[:, i, j] = xp[:, i:i_end:stride, j:j_end:stride]
    return cols.reshape(c * kh * kw, oh * ow)


def _col2im(gcols, padded_shape, kh, kw, stride, oh, ow):
    c = padded_shape[0]
    g = gcols.reshape(c, kh, kw, oh, ow)
    out = np.zeros(padded_shape, dtype=gcols.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            out[:, i:i_end:stride, j:j_end:stride] += g[:, i, j]
    return out


def maxpool2d(x, window, stride=None):
    """Windowed maximum over x[C,H,W]; gradient routes to the argmax element
    (first occurrence in row-major window order on ties)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"maxpool2d expects x[C,H,W], got {x.shape}")
    if stride is None:
        stride = window
    c, h, w = x.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} exceeds input {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    tape = active_tape()
    wants = _wants_grad(tape, x)

    # Stack the window elements on a new axis in row-major window order, so
    # np.argmax picks the first occurrence on ties.
    stack = np.empty((window * window, c, oh, ow), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            stack[i * window + j] = x.data[
                :, i:i + stride * oh:stride, j:j + stride * ow:stride
            ]
    arg = stack.argmax(axis=0)
    out = Tensor(np.take_along_axis(stack, arg[None], axis=0)[0])
    src_shape = x.shape

    def backward(g):
        gx = np.zeros(src_shape, dtype=g.dtype)
        ii, jj = np.divmod(arg, window)
        ch, oy, ox = np.meshgrid(
            np.arange(c), np.arange(oh), np.arange(ow), indexing="ij"
        )
        np.add.at(gx, (ch, oy * stride + ii, ox * stride + jj), g)
        return (gx,)

    return _finish(tape, out, (x,), backward, wants)


def _resize_matrix(in_size, out_size, dtype):
    """Row-interpolation matrix R[out, in] for align-corners-false resizing."""
    pos = (np.arange(out_size, dtype=dtype) + 0.5) * (in_size / out_size) - 0.5
    pos = np.clip(pos, 0.0, in_size - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = pos - lo
    r = np.zeros((out_size, in_size), dtype=dtype)
    rows = np.arange(out_size)
    np.add.at(r, (rows, lo), 1.0 - frac)
    np.add.at(r, (rows, hi), frac)
    return r


def bilinear_resize(x, out_h, out_w):
    """Align-corners-false bilinear interpolation of x[C,H,W] (or [H,W]).

    Resizing is a separable linear map, so the gradient is its transpose.
    A same-size call is the identity (bitwise-equal output).
    """
    x = as_tensor(x)
    if x.ndim == 2:
        x3 = reshape(x, (1,) + x.shape)
        out = bilinear_resize(x3, out_h, out_w)
        return reshape(out, (out_h, out_w))
    if x.ndim != 3:
        raise DimensionError(f"bilinear_resize expects [C,H,W], got {x.shape}")
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"target extent must be positive, got {out_h}x{out_w}")
    c, h, w = x.shape
    tape = active_tape()
    wants = _wants_grad(tape, x)
    if (out_h, out_w) == (h, w):
        out = Tensor(x.data.copy())

        def backward_id(g):
            return (g,)

        return _finish(tape, out, (x,), backward_id, wants)

    ry = _resize_matrix(h, out_h, x.data.dtype)   # (out_h, h)
    rx = _resize_matrix(w, out_w, x.data.dtype)   # (out_w, w)
    # out[c] = ry @ x[c] @ rx.T
    tmp = np.einsum("oh,chw->cow", ry, x.data, optimize=True)
    out = Tensor(tmp @ rx.T)

    def backward(g):
        gtmp = g @ rx
        gx = np.einsum("oh,cow->chw", ry, gtmp, optimize=True)
        return (np.ascontiguousarray(gx),)

    return _finish(tape, out, (x,), backward, wants)


def resize_plane(data, out_h, out_w):
    """Non-differentiable bilinear resize of a plain [H,W] array."""
    arr = np.asarray(data, dtype=np.float64)
    h, w = arr.shape
    if (out_h, out_w) == (h, w):
        return arr.copy()
    ry = _resize_matrix(h, out_h, arr.dtype)
    rx = _resize_matrix(w, out_w, arr.dtype)
    return ry @ arr @ rx.T


# ---------------------------------------------------------------------------
# Finite-difference verification harness
# ---------------------------------------------------------------------------

class FDEntry:
    __slots__ = ("name", "max_rel_err", "checked", "passed")

    def __init__(self, name, max_rel_err, checked, tolerance):
        self.name = name
        self.max_rel_err = max_rel_err
        self.checked = checked
        self.passed = max_rel_err < tolerance

    def __repr__(self):
        flag = "ok" if self.passed else "FAIL"
        return f"{self.name}: max_rel_err={self.max_rel_err:.3e} ({self.checked} probes) {flag}"


class FDReport:
    """Per-parameter comparison of analytic vs central-difference gradients."""

    def __init__(self, entries, tolerance):
        self.entries = entries
        self.tolerance = tolerance

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self):
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def failures(self):
        return [e for e in self.entries if not e.passed]

    def __repr__(self):
        lines = [repr(e) for e in self.entries]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (tol {self.tolerance:g})")
        return "\n".join(lines)


def _rel_err(a, b, atol=1e-7):
    # Below atol both sides sit in central-difference rounding noise
    # (|f| * eps / h); treating them as agreement keeps genuinely-zero
    # gradients (e.g. unused pool entries) from tripping the ratio.
    m = max(abs(a), abs(b))
    if m < atol:
        return 0.0
    return abs(a - b) / m


def finite_difference_check(
    f,
    params,
    h=1e-5,
    tolerance=1e-6,
    mode="exhaustive",
    samples=3,
    rng=None,
    atol=1e-7,
):
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor, closed over
    ``params`` (iterable of ``(name, Tensor)`` pairs or a dict).  Modes:

    - ``exhaustive``: every element of every parameter (small problems),
    - ``sampled``: ``samples`` random elements per parameter,
    - ``directional``: one random-direction derivative per parameter plus
      ``samples`` random elements (feasible for full models).

    Evaluations for the numeric side run without a tape.
    """
    if isinstance(params, dict):
        params = list(params.items())
    else:
        params = list(params)
    if rng is None:
        rng = np.random.default_rng(0)

    with Tape() as tape:
        loss = f()
        grads = tape.backward(loss)

    def eval_value():
        return float(f().data)

    entries = []
    for name, p in params:
        analytic = grads.grad(p)
        gflat = analytic.reshape(-1)
        worst = 0.0
        checked = 0

        # All perturbations below mutate p.data in place so closures over the
        # parameter (inside f) keep seeing the same array object.
        if mode == "directional":
            v = rng.standard_normal(p.data.shape)
            v /= max(np.linalg.norm(v), 1e-12)
            orig = p.data.copy()
            np.copyto(p.data, orig + h * v)
            fp = eval_value()
            np.copyto(p.data, orig - h * v)
            fm = eval_value()
            np.copyto(p.data, orig)
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, _rel_err(float((analytic * v).sum()), numeric, atol))
            checked += 1

        if mode == "exhaustive":
            idxs = range(p.data.size)
        else:
            k = min(samples, p.data.size)
            idxs = rng.choice(p.data.size, size=k, replace=False) if k else []
        for i in idxs:
            ij = np.unravel_index(i, p.data.shape)
            orig = p.data[ij]
            p.data[ij] = orig + h
            fp = eval_value()
            p.data[ij] = orig - h
            fm = eval_value()
            p.data[ij] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, _rel_err(float(gflat[i]), numeric, atol))
            checked += 1

        entries.append(FDEntry(name, worst, checked, tolerance))
    return FDReport(entries, tolerance)
