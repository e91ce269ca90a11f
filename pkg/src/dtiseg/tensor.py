"""Dense N-d tensors with tape-based reverse-mode automatic differentiation.

Everything the segmentation model needs is implemented as a primitive with a
hand-written backward pass: elementwise arithmetic, matmul, 3D convolution
(strided and transposed), instance/layer normalization, leaky ReLU, GELU,
sigmoid, softmax, concatenation, reshape/transpose/indexing, and reductions.
Data lives in numpy arrays; the tape records operations in execution order,
so replaying it in reverse is a valid topological order of the graph.

float32 is the default dtype; gradient-check tests build float64 graphs by
passing ``dtype`` explicitly (ops preserve the dtype of their inputs).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"default dtype must be float32 or float64, got {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


class Tape:
    """Ordered record of executed ops: (output tensor, backward closure)."""

    def __init__(self):
        self._entries: list[tuple[Tensor, callable]] = []

    def record(self, out: "Tensor", backward) -> None:
        self._entries.append((out, backward))

    def __len__(self) -> int:
        return len(self._entries)

    def clear(self) -> None:
        self._entries.clear()


TAPE = Tape()

_grad_enabled = True


class no_grad:
    """Context manager disabling tape recording (e.g. during inference)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        self.grad: np.ndarray | None = None
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

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def backward(self, retain_tape: bool = False) -> None:
        backward(self, retain_tape=retain_tape)

    # arithmetic sugar; the module-level functions do the work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / np.asarray(other))

    def __rtruediv__(self, other):
        return div(_constant(other, self.dtype), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _constant(x, dtype) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return _constant(x, like.dtype)


def _make_out(data: np.ndarray, inputs, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        TAPE.record(out, backward)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g over the axes numpy broadcast to reach g.shape from shape."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor, retain_tape: bool = False) -> None:
    """Reverse-replay the tape from ``loss``, accumulating leaf gradients.

    ``loss`` must be a scalar produced by a recorded operation. The tape is
    cleared afterwards unless ``retain_tape`` is set.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    entries = TAPE._entries
    idx = None
    for i in range(len(entries) - 1, -1, -1):
        if entries[i][0] is loss:
            idx = i
            break
    if idx is None:
        raise ValueError("loss is not connected to the tape (detached or built under no_grad)")
    loss.grad = np.ones_like(loss.data)
    for i in range(idx, -1, -1):
        out, fn = entries[i]
        if out.grad is not None:
            fn(out.grad)
    if not retain_tape:
        TAPE.clear()


# ---------------------------------------------------------------------------
# elementwise & arithmetic primitives


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make_out(data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make_out(data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make_out(data, (a, b), bwd)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    data = a.data ** p

    def bwd(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make_out(data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * data)

    return _make_out(data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make_out(data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2")
    data = a.data @ b.data

    def bwd(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make_out(data, (a, b), bwd)


def leaky_relu(a: Tensor, negative_slope: float = 0.01) -> Tensor:
    pos = a.data > 0
    data = np.where(pos, a.data, a.data * negative_slope)

    def bwd(g):
        _accum(a, np.where(pos, g, g * negative_slope))

    return _make_out(data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.empty_like(x)
    p = x >= 0
    data[p] = 1.0 / (1.0 + np.exp(-x[p]))
    ex = np.exp(x[~p])
    data[~p] = ex / (1.0 + ex)

    def bwd(g):
        _accum(a, g * data * (1.0 - data))

    return _make_out(data, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0))).astype(x.dtype)
    data = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        _accum(a, g * (cdf + x * pdf.astype(x.dtype)))

    return _make_out(data, (a,), bwd)


def softmax(a: Tensor, axis: int = 0) -> Tensor:
    """Numerically stabilized softmax along ``axis``; rejects non-finite input."""
    x = a.data
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input contains non-finite values")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _make_out(data, (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _make_out(data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return _make_out(data, (a,), bwd)


def getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accum(a, full)

    return _make_out(data, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make_out(data, tensors, bwd)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g, dtype=a.dtype))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).astype(a.dtype, copy=True))

    return _make_out(data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in ax]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# normalization


def normalize(x: Tensor, gamma: Tensor, beta: Tensor, axes, eps: float = 1e-5) -> Tensor:
    """Affine normalization over ``axes``: gamma * (x - mean)/std + beta.

    gamma/beta must broadcast against x (e.g. (C,1,1,1) for instance norm on
    a (C,D,H,W) input, (d,) for layer norm over the last axis).
    """
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def bwd(g):
        _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
        _accum(beta, _unbroadcast(g, beta.shape))
        if x.requires_grad:
            gh = g * gamma.data
            m1 = gh.mean(axis=axes, keepdims=True)
            m2 = (gh * xhat).mean(axis=axes, keepdims=True)
            _accum(x, inv * (gh - m1 - xhat * m2))

    return _make_out(data, (x, gamma, beta), bwd)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of a (C, D, H, W) volume with learnable affine."""
    return normalize(x, gamma, beta, axes=(1, 2, 3), eps=eps)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return normalize(x, gamma, beta, axes=-1, eps=eps)


# ---------------------------------------------------------------------------
# 3D convolution


def _out_extents(xpad_shape, k: int, stride: int):
    return tuple((n - k) // stride + 1 for n in xpad_shape[1:])


def _offsets(k: int):
    return ((a, b, c) for a in range(k) for b in range(k) for c in range(k))


def _slice3(arr: np.ndarray, a: int, b: int, c: int, stride: int, extents) -> np.ndarray:
    d, h, w = extents
    return arr[:, a:a + stride * d:stride, b:b + stride * h:stride, c:c + stride * w:stride]


# The conv kernels accumulate one kernel offset at a time: the padded input
# (a few MB) stays cache-resident across the k^3 passes, which on
# memory-bandwidth-limited hosts beats materializing an im2col matrix.


def _gather(xpad: np.ndarray, kern: np.ndarray, stride: int) -> np.ndarray:
    # (C_in, Dp, Hp, Wp) x (C_out, C_in, k, k, k) -> (C_out, D', H', W')
    k = kern.shape[-1]
    ext = _out_extents(xpad.shape, k, stride)
    out = np.zeros((kern.shape[0],) + ext, dtype=xpad.dtype)
    for a, b, c in _offsets(k):
        sl = _slice3(xpad, a, b, c, stride, ext)
        out += np.tensordot(kern[:, :, a, b, c], sl, axes=([1], [0]))
    return out


def _kernel_grad(y: np.ndarray, xpad: np.ndarray, stride: int, k: int) -> np.ndarray:
    # (C_out, D', H', W') x (C_in, Dp, Hp, Wp) -> (C_out, C_in, k, k, k)
    ext = y.shape[1:]
    out = np.empty((y.shape[0], xpad.shape[0], k, k, k), dtype=y.dtype)
    for a, b, c in _offsets(k):
        sl = _slice3(xpad, a, b, c, stride, ext)
        out[:, :, a, b, c] = np.tensordot(y, sl, axes=([1, 2, 3], [1, 2, 3]))
    return out


def _scatter(y: np.ndarray, kern: np.ndarray, stride: int, out_shape) -> np.ndarray:
    # adjoint of _gather: (C_out, D', H', W') x (C_out, C_in, k,k,k) -> (C_in, Dp, Hp, Wp)
    k = kern.shape[-1]
    ext = y.shape[1:]
    out = np.zeros(out_shape, dtype=y.dtype)
    for a, b, c in _offsets(k):
        contrib = np.tensordot(kern[:, :, a, b, c], y, axes=([0], [0]))
        _slice3(out, a, b, c, stride, ext)[...] += contrib
    return out


def _pad3(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))


def conv3d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (C_in,D,H,W) volume with a (C_out,C_in,k,k,k) kernel.

    Output extent per axis: floor((n + 2*padding - k)/stride) + 1.
    """
    cin, d, h, w = x.shape
    cout, kcin, k = kernel.shape[0], kernel.shape[1], kernel.shape[-1]
    if kernel.ndim != 5 or kernel.shape[2:] != (k, k, k):
        raise ValueError(f"kernel must be (C_out, C_in, k, k, k), got {kernel.shape}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if kcin != cin:
        raise ValueError(f"kernel expects {kcin} input channels, input has {cin}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    outs = [(n + 2 * padding - k) // stride + 1 for n in (d, h, w)]
    if min(outs) < 1:
        raise ValueError(f"non-positive output extent {outs} for input {x.shape} kernel {k} "
                         f"stride {stride} padding {padding}")
    xpad = _pad3(x.data, padding)
    data = _gather(xpad, kernel.data, stride)

    def bwd(g):
        if kernel.requires_grad:
            _accum(kernel, _kernel_grad(g, xpad, stride, k))
        if x.requires_grad:
            p = padding
            if stride == 1 and p <= k - 1:
                # full correlation with the flipped/swapped kernel is a
                # gather, which is cheaper than scatter-add here
                kflip = kernel.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
                _accum(x, _gather(_pad3(g, k - 1 - p), kflip, 1))
            else:
                gpad = _scatter(g, kernel.data, stride, xpad.shape)
                _accum(x, gpad[:, p:p + d, p:p + h, p:p + w] if p else gpad)

    return _make_out(data, (x, kernel), bwd)


def conv_transpose3d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv3d: (C_in,D,H,W) x (C_in,C_out,k,k,k) -> (C_out,D_out,...).

    D_out = (D - 1)*stride - 2*padding + k. With the same kernel array K,
    <conv3d(u, K, s, p), v> == <u, conv_transpose3d(v, K, s, p)>.
    """
    cin, d, h, w = x.shape
    if kernel.ndim != 5:
        raise ValueError(f"kernel must be (C_in, C_out, k, k, k), got {kernel.shape}")
    kcin, cout, k = kernel.shape[0], kernel.shape[1], kernel.shape[-1]
    if kcin != cin:
        raise ValueError(f"kernel expects {kcin} input channels, input has {cin}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    pad_shape = (cout,) + tuple((n - 1) * stride + k for n in (d, h, w))
    outs = [n - 2 * padding for n in pad_shape[1:]]
    if min(outs) < 1:
        raise ValueError(f"non-positive output extent {outs}")
    # _scatter reads the kernel's first axis as the source channels, so the
    # (C_in, C_out, ...) layout makes this the exact adjoint of conv3d
    out_pad = _scatter(x.data, kernel.data, stride, pad_shape)
    p = padding
    data = out_pad[:, p:pad_shape[1] - p, p:pad_shape[2] - p, p:pad_shape[3] - p] if p else out_pad
    data = np.ascontiguousarray(data)

    def bwd(g):
        gpad = _pad3(g, p)
        if x.requires_grad:
            _accum(x, _gather(gpad, kernel.data, stride))
        if kernel.requires_grad:
            _accum(kernel, _kernel_grad(x.data, gpad, stride, k))

    return _make_out(data, (x, kernel), bwd)
