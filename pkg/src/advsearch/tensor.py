"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tape records primitive operations executed while it is active (one tape per
thread); Tape.backward replays the record once in reverse topological order
and deposits gradients on watched leaves. Everything is float64: gradient
checks at 1e-4 relative tolerance are not reliable in float32.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ArgumentError, ShapeError, StateError

_TLS = threading.local()


def _active_tape():
    return getattr(_TLS, "tape", None)


@contextmanager
def suspend_tape():
    """Temporarily stop recording on this thread (data-generation escapes,
    e.g. regenerating an attacked batch inside a taped training step)."""
    prev = _active_tape()
    _TLS.tape = None
    try:
        yield
    finally:
        _TLS.tape = prev


class Tensor:
    """Dense float64 value, optionally carrying a gradient after backward."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("parents", "backward", "tensor")

    def __init__(self, parents, backward, tensor):
        self.parents = parents
        self.backward = backward
        self.tensor = tensor


class Tape:
    """Append-only record of primitive operations for one backward pass.

    Use as a context manager; only one tape may be active per thread. When
    ``watch`` is given, only the listed tensors receive gradients and every
    other tensor (model parameters included) is treated as a constant, which
    is the fast path for input-gradient attacks.
    """

    def __init__(self, watch=None):
        self.nodes = []
        self._ids = {}
        self._watch_only = None
        if watch is not None:
            self._watch_only = {id(t) for t in watch}
            for t in watch:
                self.watch(t)

    def __enter__(self):
        if _active_tape() is not None:
            raise StateError("a tape is already active on this thread")
        _TLS.tape = self
        return self

    def __exit__(self, *exc):
        _TLS.tape = None
        return False

    def watch(self, t):
        """Register t as a gradient leaf."""
        if id(t) not in self._ids:
            self._append(t, (), None)
        return self

    def _append(self, tensor, parents, backward):
        self.nodes.append(_Node(parents, backward, tensor))
        self._ids[id(tensor)] = len(self.nodes) - 1
        return tensor

    def _input_node(self, t):
        idx = self._ids.get(id(t))
        if idx is not None:
            return idx
        if t.requires_grad and (self._watch_only is None or id(t) in self._watch_only):
            self.watch(t)
            return self._ids[id(t)]
        return None

    def backward(self, output, seed=None):
        """Accumulate d(seed . output)/d(leaf) into every watched leaf's .grad."""
        if not self.nodes:
            raise StateError("backward before forward: tape is empty")
        out_idx = self._ids.get(id(output))
        if out_idx is None:
            raise StateError("output was not produced under this tape")
        if seed is None:
            seed_arr = np.ones_like(output.data)
        else:
            seed_arr = seed.data if isinstance(seed, Tensor) else np.asarray(seed, dtype=np.float64)
            if seed_arr.shape != output.data.shape:
                raise ShapeError(
                    f"backward: seed shape {seed_arr.shape} != output shape {output.data.shape}"
                )
        grads = [None] * len(self.nodes)
        grads[out_idx] = np.asarray(seed_arr, dtype=np.float64)
        for i in range(out_idx, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            for pid, pg in zip(node.parents, node.backward(g)):
                if pid is None or pg is None:
                    continue
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg
            grads[i] = None
        for i, node in enumerate(self.nodes):
            if node.backward is not None:
                continue
            leaf = node.tensor
            if not leaf.requires_grad:
                continue
            g = grads[i]
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def backward(tape, output, seed=None):
    """Module-level alias for Tape.backward."""
    tape.backward(output, seed)


def _emit(inputs, out_data, backward_fn):
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is None:
        return out
    pids = tuple(tape._input_node(t) for t in inputs)
    if all(p is None for p in pids):
        return out
    return tape._append(out, pids, backward_fn)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_nonempty(name, *tensors):
    for t in tensors:
        if t.data.size == 0:
            raise ArgumentError(f"{name}: empty input")


# ---------------------------------------------------------------------------
# elementwise and arithmetic primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _emit(
        (a, b), out,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _emit(
        (a, b), out,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _emit(
        (a, b), out,
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _emit(
        (a, b), out,
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _emit((a,), a.data * c, lambda g: (g * c,))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _emit((x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def log(x):
    x = as_tensor(x)
    return _emit((x,), np.log(x.data), lambda g: (g / x.data,))


def sigmoid(x):
    x = as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _emit((x,), y, lambda g: (g * y * (1.0 - y),))


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data >= b.data
    out = np.where(mask, a.data, b.data)
    return _emit(
        (a, b), out,
        lambda g: (
            _unbroadcast(g * mask, a.data.shape),
            _unbroadcast(g * (~mask), b.data.shape),
        ),
    )


def identity(x):
    x = as_tensor(x)
    return _emit((x,), x.data, lambda g: (g,))


def zero_like(x, stride=1):
    """The all-zero map; with a stride it also subsamples the spatial grid."""
    x = as_tensor(x)
    if stride == 1:
        out = np.zeros_like(x.data)
    else:
        if x.ndim != 4:
            raise ShapeError("zero_like: stride > 1 needs NCHW input")
        n, c, h, w = x.data.shape
        out = np.zeros((n, c, (h + stride - 1) // stride, (w + stride - 1) // stride))
    return _emit((x,), out, lambda g: (np.zeros_like(x.data),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_nonempty("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        return _emit((a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))
    if ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        return _emit((a, b), ad @ bd, lambda g: (np.outer(g, bd), ad.T @ g))
    if ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        return _emit((a, b), ad @ bd, lambda g: (bd @ g, np.outer(ad, g)))
    if ad.ndim == 1 and bd.ndim == 1:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
        return _emit((a, b), ad @ bd, lambda g: (g * bd, g * ad))
    raise ShapeError(f"matmul: unsupported ranks {ad.ndim} @ {bd.ndim}")


# ---------------------------------------------------------------------------
# reductions and indexing


def _sum_backward(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = axis if isinstance(axis, tuple) else (axis,)
    g_exp = np.expand_dims(g, axes)
    return np.broadcast_to(g_exp, shape).copy()


def reduce_sum(x, axis=None):
    x = as_tensor(x)
    out = x.data.sum(axis=axis)
    return _emit((x,), out, lambda g: (_sum_backward(g, x.data.shape, axis),))


def reduce_mean(x, axis=None):
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.data.shape[a] for a in axes]))
    out = x.data.mean(axis=axis)
    return _emit((x,), out, lambda g: (_sum_backward(g, x.data.shape, axis) / count,))


def reduce_max(x, axis=-1):
    """Max along one axis; gradient routes to the first maximal element."""
    x = as_tensor(x)
    am = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(am, axis), axis=axis).squeeze(axis)

    def bwd(g):
        z = np.zeros_like(x.data)
        np.put_along_axis(z, np.expand_dims(am, axis), np.expand_dims(g, axis), axis=axis)
        return (z,)

    return _emit((x,), out, bwd)


def take_per_row(x, idx):
    """x[i, idx[i]] for a [N, K] tensor and integer index vector."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("take_per_row: expected a 2-D tensor")
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    out = x.data[rows, idx]

    def bwd(g):
        z = np.zeros_like(x.data)
        z[rows, idx] = g
        return (z,)

    return _emit((x,), out, bwd)


def index1d(x, i):
    """Scalar element x[i] of a 1-D tensor."""
    x = as_tensor(x)
    if x.ndim != 1:
        raise ShapeError("index1d: expected a 1-D tensor")
    i = int(i)
    out = np.asarray(x.data[i])

    def bwd(g):
        z = np.zeros_like(x.data)
        z[i] = g
        return (z,)

    return _emit((x,), out, bwd)


def channel_slice(x, start, stop):
    """x[:, start:stop] along the channel axis of an NCHW tensor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("channel_slice: expected NCHW input")
    out = x.data[:, start:stop].copy()

    def bwd(g):
        z = np.zeros_like(x.data)
        z[:, start:stop] = g
        return (z,)

    return _emit((x,), out, bwd)


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _emit((x,), y, bwd)


def log_softmax(x, axis=-1):
    """Numerically stable log(softmax(x)); finite for any finite logits."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _emit((x,), out, bwd)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        slicer = [slice(None)] * g.ndim
        parts = []
        for i in range(len(sizes)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            parts.append(g[tuple(slicer)])
        return tuple(parts)

    return _emit(tuple(tensors), out, bwd)


def add_n(tensors):
    """Sum of same-shape tensors as one node."""
    tensors = [as_tensor(t) for t in tensors]
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data
    return _emit(tuple(tensors), out, lambda g: tuple(g for _ in tensors))


def reshape(x, shape):
    x = as_tensor(x)
    return _emit((x,), x.data.reshape(shape), lambda g: (g.reshape(x.data.shape),))


def strided_subsample(x, stride):
    """Spatial subsampling x[:, :, ::s, ::s]; parameter-free reduction path."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("strided_subsample: expected NCHW input")
    out = x.data[:, :, ::stride, ::stride].copy()

    def bwd(g):
        z = np.zeros_like(x.data)
        z[:, :, ::stride, ::stride] = g
        return (z,)

    return _emit((x,), out, bwd)


# ---------------------------------------------------------------------------
# convolution and pooling


def _pad_nchw(x, ph, pw, value=0.0):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _windows(xp, kh, kw, stride, dil):
    n, c, h, w = xp.shape
    eh = (kh - 1) * dil + 1
    ew = (kw - 1) * dil + 1
    ho = (h - eh) // stride + 1
    wo = (w - ew) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv window: input {h}x{w} too small for kernel {kh}x{kw}")
    sn, sc, sh, sw = xp.strides
    shape = (n, c, ho, wo, kh, kw)
    strides = (sn, sc, sh * stride, sw * stride, sh * dil, sw * dil)
    return np.lib.stride_tricks.as_strided(xp, shape, strides, writeable=False)


def _scatter_windows(gcols, padded_shape, stride, dil):
    n, c, ho, wo, kh, kw = gcols.shape
    gx = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i * dil: i * dil + ho * stride: stride,
               j * dil: j * dil + wo * stride: stride] += gcols[:, :, :, :, i, j]
    return gx


def _crop(gxp, ph, pw):
    if ph == 0 and pw == 0:
        return gxp
    h, w = gxp.shape[2], gxp.shape[3]
    return gxp[:, :, ph:h - ph, pw:w - pw]


def conv2d(x, w, stride=1, padding=0, dilation=1):
    """Dense 2-D convolution, NCHW x [Co, Ci, kh, kw] weights."""
    x, w = as_tensor(x), as_tensor(w)
    _check_nonempty("conv2d", x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d: expected NCHW input and OIHW weights")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.data.shape[1]} != weight channels {w.data.shape[1]}"
        )
    kh, kw = w.data.shape[2], w.data.shape[3]
    xp = _pad_nchw(x.data, padding, padding)
    cols = _windows(xp, kh, kw, stride, dilation)
    out = np.einsum("nchwij,ocij->nohw", cols, w.data, optimize=True)

    def bwd(g):
        gw = np.einsum("nohw,nchwij->ocij", g, cols, optimize=True)
        gcols = np.einsum("nohw,ocij->nchwij", g, w.data, optimize=True)
        gx = _crop(_scatter_windows(gcols, xp.shape, stride, dilation), padding, padding)
        return (gx, gw)

    return _emit((x, w), out, bwd)


def depthwise_conv2d(x, w, stride=1, padding=0, dilation=1):
    """Per-channel convolution, weights [C, kh, kw]."""
    x, w = as_tensor(x), as_tensor(w)
    _check_nonempty("depthwise_conv2d", x, w)
    if x.ndim != 4 or w.ndim != 3:
        raise ShapeError("depthwise_conv2d: expected NCHW input and CHW weights")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"depthwise_conv2d: channels {x.data.shape[1]} != weight channels {w.data.shape[0]}"
        )
    kh, kw = w.data.shape[1], w.data.shape[2]
    xp = _pad_nchw(x.data, padding, padding)
    cols = _windows(xp, kh, kw, stride, dilation)
    out = np.einsum("nchwij,cij->nchw", cols, w.data, optimize=True)

    def bwd(g):
        gw = np.einsum("nchw,nchwij->cij", g, cols, optimize=True)
        gcols = np.einsum("nchw,cij->nchwij", g, w.data, optimize=True)
        gx = _crop(_scatter_windows(gcols, xp.shape, stride, dilation), padding, padding)
        return (gx, gw)

    return _emit((x, w), out, bwd)


def max_pool2d(x, kernel=3, stride=1, padding=1):
    """Max pooling; gradient goes to the first maximal element of each window."""
    x = as_tensor(x)
    _check_nonempty("max_pool2d", x)
    if x.ndim != 4:
        raise ShapeError("max_pool2d: expected NCHW input")
    xp = _pad_nchw(x.data, padding, padding, value=-np.inf)
    wins = _windows(xp, kernel, kernel, stride, 1)
    n, c, ho, wo = wins.shape[:4]
    flat = wins.reshape(n, c, ho, wo, kernel * kernel)
    am = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]

    def bwd(g):
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, am[..., None], g[..., None], axis=-1)
        gcols = onehot.reshape(n, c, ho, wo, kernel, kernel)
        return (_crop(_scatter_windows(gcols, xp.shape, stride, 1), padding, padding),)

    return _emit((x,), out, bwd)


def avg_pool2d(x, kernel=3, stride=1, padding=1):
    """Average pooling over the valid (non-padded) pixels of each window."""
    x = as_tensor(x)
    _check_nonempty("avg_pool2d", x)
    if x.ndim != 4:
        raise ShapeError("avg_pool2d: expected NCHW input")
    xp = _pad_nchw(x.data, padding, padding)
    wins = _windows(xp, kernel, kernel, stride, 1)
    ones = _pad_nchw(np.ones((1, 1) + x.data.shape[2:]), padding, padding)
    counts = _windows(ones, kernel, kernel, stride, 1).sum(axis=(4, 5))
    out = wins.sum(axis=(4, 5)) / counts

    def bwd(g):
        gper = g / counts
        gcols = np.broadcast_to(gper[..., None, None], gper.shape + (kernel, kernel))
        return (_crop(_scatter_windows(gcols, xp.shape, stride, 1), padding, padding),)

    return _emit((x,), out, bwd)


def global_avg_pool(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("global_avg_pool: expected NCHW input")
    return reduce_mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Frozen-at-train-time running statistics for one normalization layer."""

    def __init__(self, num_features, momentum=0.1, eps=1e-5):
        self.mean = np.zeros(num_features)
        self.var = np.ones(num_features)
        self.momentum = momentum
        self.eps = eps

    def copy(self):
        c = BatchNormState(len(self.mean), self.momentum, self.eps)
        c.mean = self.mean.copy()
        c.var = self.var.copy()
        return c


def batch_norm(x, gamma, beta, state, training):
    """Per-channel normalization for NCHW or NF input.

    Train mode normalizes by batch statistics and updates the running record
    in place; eval mode uses the frozen running statistics (attacks always run
    in eval mode, so attack-time statistics never drift).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    elif x.ndim == 2:
        axes, bshape = (0,), (1, -1)
    else:
        raise ShapeError("batch_norm: expected NCHW or NF input")
    gd = gamma.data.reshape(bshape)
    bd = beta.data.reshape(bshape)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.mean += state.momentum * (mu - state.mean)
        state.var += state.momentum * (var - state.var)
        inv = 1.0 / np.sqrt(var + state.eps).reshape(bshape)
        xhat = (x.data - mu.reshape(bshape)) * inv

        def bwd(g):
            dxhat = g * gd
            m1 = dxhat.mean(axis=axes, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            return dx, dgamma, dbeta

    else:
        inv = 1.0 / np.sqrt(state.var + state.eps).reshape(bshape)
        xhat = (x.data - state.mean.reshape(bshape)) * inv

        def bwd(g):
            dx = g * gd * inv
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            return dx, dgamma, dbeta

    out = gd * xhat + bd
    return _emit((x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# serialization: one-line shape header + raw little-endian float64


def save_tensor(path, array):
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    header = "shape: " + " ".join(str(d) for d in arr.shape) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(arr.tobytes())


def load_tensor(path):
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").strip()
        if not header.startswith("shape:"):
            raise ArgumentError(f"{path}: missing tensor shape header")
        shape = tuple(int(tok) for tok in header.split()[1:])
        data = np.frombuffer(f.read(), dtype="<f8")
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise ArgumentError(f"{path}: payload has {data.size} values, header implies {expected}")
    return data.reshape(shape).astype(np.float64)
