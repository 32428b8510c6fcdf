"""Tape-based reverse-mode autodiff over numpy arrays.

Every differentiable op appends one entry to the active :class:`Tape`.
``backward`` replays the tape in reverse, accumulating gradients into
:class:`Parameter` leaves, then clears it.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Parameter(Tensor):
    """Trainable leaf. ``grad`` always exists and has the value's shape."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=trainable)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter(shape={self.shape}, trainable={self.trainable})"


class Tape:
    """Ordered record of (output, inputs, backward_fn) entries."""

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.entries.append((out, tuple(inputs), backward_fn))

    def clear(self):
        self.entries.clear()

    def __len__(self):
        return len(self.entries)


_default_tape = Tape()
_tape_stack: list[Tape | None] = [_default_tape]


def active_tape() -> Tape | None:
    return _tape_stack[-1]


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (teacher forwards, evaluation)."""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


@contextlib.contextmanager
def use_tape(tape: Tape):
    _tape_stack.append(tape)
    try:
        yield tape
    finally:
        _tape_stack.pop()


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape | None = None):
    """Populate ``grad`` on every Parameter reachable from ``loss``."""
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise RuntimeError("backward called inside no_grad()")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for out, inputs, fn in reversed(tape.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if isinstance(t, Parameter):
                    t.grad = t.grad + gi.astype(t.data.dtype, copy=False)
                else:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi
        if isinstance(loss, Parameter):
            loss.grad = loss.grad + 1.0
    finally:
        tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return _make(np.asarray(a.data.sum(), dtype=dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean_all(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.size
    return _make(np.asarray(a.data.mean(), dtype=dtype), (a,),
                 lambda g: (np.full(shape, g / n, dtype=dtype),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


# -- layers ------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``out[b, o] = sum_i x[b, i] * w[o, i] + bias[o]``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match {w.shape[0]} outputs")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gb = g.sum(axis=0) if b is not None else None
        return g @ wd, g.T @ xd, gb

    inputs = (x, w, b) if b is not None else (x, w)
    return _make(out, inputs, bw)


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _conv_taps(xp: np.ndarray, k: int, stride: int, ho: int, wo: int):
    for i in range(k):
        for j in range(k):
            yield i, j, xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct cross-correlation, accumulated one kernel tap at a time."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    bsz, c, h, wd_ = x.shape
    f, cw, kh, kw = w.shape
    if cw != c or kh != kw:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    k = kh
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd_, k, stride, pad)
    if ho <= 0 or wo <= 0 or k > h + 2 * pad or k > wd_ + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k} too large for input {h}x{wd_} with pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wdat = w.data
    out = np.zeros((bsz, f, ho, wo), dtype=np.result_type(x.dtype, w.dtype))
    for i, j, xs in _conv_taps(xp, k, stride, ho, wo):
        out += np.einsum("bchw,fc->bfhw", xs, wdat[:, :, i, j], optimize=True)
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wdat)
        for i, j, xs in _conv_taps(xp, k, stride, ho, wo):
            gw[:, :, i, j] = np.einsum("bchw,bfhw->fc", xs, g, optimize=True)
            gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                np.einsum("bfhw,fc->bchw", g, wdat[:, :, i, j], optimize=True)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd_] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    inputs = (x, w, b) if b is not None else (x, w)
    return _make(out, inputs, bw)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; trailing rows/cols that do not fill a window are dropped."""
    bsz, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeError(f"maxpool2d: window {k} larger than input {h}x{w}")
    xc = x.data[:, :, :ho * k, :wo * k]
    win = xc.reshape(bsz, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * k, :wo * k] = gw.reshape(bsz, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5) \
            .reshape(bsz, c, ho * k, wo * k)
        return (gx,)

    return _make(out, (x,), bw)


# -- losses ------------------------------------------------------------------

def log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: Tensor) -> Tensor:
    ls = log_softmax_np(z.data)
    p = np.exp(ls)
    return _make(ls, (z,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def _check_labels(labels: np.ndarray, k: int, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]`` (max-shifted)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, K] logits, got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, k, n)
    ls = log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -ls[rows, labels].mean()

    def bw(g):
        d = np.exp(ls)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def soft_cross_entropy(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """Batch mean of ``-sum_k p_k log softmax(logits)_k`` for fixed target rows ``p``."""
    if logits.shape != target_probs.shape:
        raise ShapeError(f"soft_cross_entropy: {logits.shape} vs targets {target_probs.shape}")
    n = logits.shape[0]
    ls = log_softmax_np(logits.data)
    loss = -(target_probs * ls).sum() / n

    def bw(g):
        sm = np.exp(ls)
        return ((sm * target_probs.sum(axis=1, keepdims=True) - target_probs) * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def kl_div(logits: Tensor, target_logp: np.ndarray) -> Tensor:
    """Batch mean of ``KL(p || softmax(logits))`` for fixed target log-probabilities."""
    if logits.shape != target_logp.shape:
        raise ShapeError(f"kl_div: {logits.shape} vs targets {target_logp.shape}")
    n = logits.shape[0]
    ls = log_softmax_np(logits.data)
    p = np.exp(target_logp)
    loss = (p * (target_logp - ls)).sum() / n

    def bw(g):
        return ((np.exp(ls) * p.sum(axis=1, keepdims=True) - p) * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def custom(x: Tensor, out: np.ndarray, grad_fn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Record a unary op whose forward value and vector-Jacobian product are supplied by the caller."""
    return _make(out, (x,), lambda g: (grad_fn(g),))
