"""Reverse-mode automatic differentiation on numpy arrays.

Tape-based engine in the micrograd style: every operation returns a new
:class:`Tensor` holding the forward value plus a closure that scatters the
output gradient back to the operation's parents. Calling ``backward()`` on a
scalar loss walks the tape in reverse topological order.

Arrays are float32 by default. All ops preserve the dtype of their inputs,
so a graph built from float64 leaves runs end to end in float64 (used by the
finite-difference oracle when float32 round-off would drown the signal).
Reductions (sum/mean, batch statistics) accumulate in float64 and truncate
back to the working dtype.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operands do not conform (configuration error, not a runtime glitch)."""


class NonFiniteError(RuntimeError):
    """A value that must stay finite turned into NaN or +/-Inf."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, (np.ndarray, np.generic)):
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
            self.data = arr
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss, got shape %r" % (self.shape,))
        order = []
        seen = set()
        stack = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; scalars are treated as constants of the tensor's dtype.
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, _wrap(1.0 / other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def all_finite(arr: np.ndarray) -> bool:
    """Two scalar reductions instead of a full isfinite map: NaN poisons both
    min and max, +inf fails the max check, -inf the min check."""
    if arr.size == 0:
        return True
    return bool(np.isfinite(arr.min()) and np.isfinite(arr.max()))


def check_finite(t: Tensor, where: str = "") -> Tensor:
    """Raise NonFiniteError naming `where` if any entry is NaN/Inf."""
    if not all_finite(t.data):
        bad = int(np.size(t.data) - np.isfinite(t.data).sum())
        raise NonFiniteError(f"{bad} non-finite values in {where or 'tensor'}")
    return t


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))
    return _make(a.data - b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)
    return _make(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)
    return _make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g * (a.data > 0))
    return _make(np.maximum(a.data, 0), (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through strictly inside [lo, hi]."""
    def backward(g):
        _accumulate(a, g * ((a.data > lo) & (a.data < hi)))
    return _make(np.clip(a.data, lo, hi), (a,), backward)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    if axis is not None:
        # Per-axis reductions rejoin the working-precision graph; full
        # reductions (losses, monitors) keep the float64 accumulator so the
        # finite-difference oracle sees the loss at full precision.
        out_data = out_data.astype(a.data.dtype)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))
    return _make(out_data, (a,), backward)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(a, g.reshape(a.shape))
    return _make(a.data.reshape(shape), (a,), backward)


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accumulate(p, piece)
    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """(B, ...) -> (B*k, ...) with each row repeated k times consecutively."""
    def backward(g):
        _accumulate(a, g.reshape((a.shape[0], k) + a.shape[1:]).sum(axis=1))
    return _make(np.repeat(a.data, k, axis=0), (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        _accumulate(a, full)
    return _make(a.data[index], (a,), backward)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not conform: {a.shape} @ {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)
    return _make(a.data @ b.data, (a, b), backward)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map out[b,o] = sum_i x[b,i] w[i,o] + bias[o]."""
    if x.data.ndim != 2 or weights.data.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense shapes do not conform: x{x.shape}, w{weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias shape {bias.shape} != ({weights.shape[1]},)")
    return add(matmul(x, weights), bias)


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------

def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(e.dtype)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(logits, out_data * (g - dot))
    return _make(out_data, (logits,), backward)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True, dtype=np.float64)).astype(shifted.dtype)
    out_data = shifted - lse

    def backward(g):
        p = np.exp(out_data)
        _accumulate(logits, g - p * g.sum(axis=axis, keepdims=True))
    return _make(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# 1-D convolution machinery
#
# Layouts: activations (B, C, L); conv kernels (F, C, K); transpose-conv
# kernels (C_in, F_out, K). Both use cross-correlation semantics, and
# transpose_conv1d is the exact adjoint of conv1d for matched (K, stride).
# ---------------------------------------------------------------------------

def conv_out_len(length: int, kernel: int, stride: int, padding: int = 0) -> int:
    if kernel > length + 2 * padding:
        raise ShapeError(f"kernel {kernel} larger than padded input {length + 2 * padding}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    return (length + 2 * padding - kernel) // stride + 1


def tconv_out_len(length: int, kernel: int, stride: int) -> int:
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    return (length - 1) * stride + kernel


def _gather_windows(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """(B, C, L) -> contiguous (B, C, K, L_out): tap k of window i is x[.., i*s+k]."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    n_batch, n_chan, length = x.shape
    l_out = (length - kernel) // stride + 1
    cols = np.empty((n_batch, n_chan, kernel, l_out), dtype=x.dtype)
    for k in range(kernel):
        cols[:, :, k, :] = x[:, :, k:k + stride * l_out:stride]
    return cols


def _scatter_windows(cols: np.ndarray, length: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of _gather_windows: scatter-add (B, C, K, L_out) onto (B, C, L)."""
    n_batch, n_chan, kernel, l_out = cols.shape
    padded = np.zeros((n_batch, n_chan, length + 2 * padding), dtype=cols.dtype)
    for k in range(kernel):
        padded[:, :, k:k + stride * l_out:stride] += cols[:, :, k, :]
    if padding:
        return padded[:, :, padding:-padding]
    return padded


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    n_batch, n_chan, length = x.shape
    n_filt, k_chan, kernel = kernels.shape
    if k_chan != n_chan:
        raise ShapeError(f"conv1d channels: input {n_chan} vs kernels {k_chan}")
    l_out = conv_out_len(length, kernel, stride, padding)

    cols = _gather_windows(x.data, kernel, stride, padding) \
        .reshape(n_batch, n_chan * kernel, l_out)
    w = kernels.data.reshape(n_filt, n_chan * kernel)
    out_data = np.matmul(w, cols)                          # (B, F, L_out)

    def backward(g):
        if kernels.requires_grad:
            gw = np.tensordot(g, cols, axes=((0, 2), (0, 2)))
            _accumulate(kernels, gw.reshape(n_filt, n_chan, kernel))
        if x.requires_grad:
            gcols = np.matmul(w.T, g)                      # (B, C*K, L_out)
            _accumulate(x, _scatter_windows(
                gcols.reshape(n_batch, n_chan, kernel, l_out), length, stride, padding))
    return _make(out_data, (x, kernels), backward)


def transpose_conv1d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    n_batch, n_chan, length = x.shape
    k_chan, n_filt, kernel = kernels.shape
    if k_chan != n_chan:
        raise ShapeError(f"transpose_conv1d channels: input {n_chan} vs kernels {k_chan}")
    l_out = tconv_out_len(length, kernel, stride)

    w = kernels.data.reshape(n_chan, n_filt * kernel)
    cols = np.matmul(w.T, x.data)                          # (B, F*K, L)
    out_data = _scatter_windows(cols.reshape(n_batch, n_filt, kernel, length),
                                l_out, stride, padding=0)

    def backward(g):
        gathered = _gather_windows(g, kernel, stride, padding=0) \
            .reshape(n_batch, n_filt * kernel, length)
        if x.requires_grad:
            _accumulate(x, np.matmul(w, gathered))         # (B, C, L)
        if kernels.requires_grad:
            gw = np.tensordot(x.data, gathered, axes=((0, 2), (0, 2)))
            _accumulate(kernels, gw.reshape(n_chan, n_filt, kernel))
    return _make(out_data, (x, kernels), backward)


def max_pool1d(x: Tensor, width: int) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the lowest index."""
    n_batch, n_chan, length = x.shape
    l_out = length // width
    if l_out < 1:
        raise ShapeError(f"pool width {width} larger than input length {length}")
    trimmed = x.data[:, :, :l_out * width].reshape(n_batch, n_chan, l_out, width)
    idx = trimmed.argmax(axis=3)                           # first max wins ties
    out_data = np.take_along_axis(trimmed, idx[..., None], axis=3)[..., 0]

    def backward(g):
        gx = np.zeros((n_batch, n_chan, l_out, width), dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=3)
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, :l_out * width] = gx.reshape(n_batch, n_chan, l_out * width)
        _accumulate(x, full)
    return _make(out_data, (x,), backward)


def dropout(x: Tensor, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout: training scales kept units by 1/(1-rate); eval is identity."""
    if not training or rate <= 0.0:
        return x
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.data.dtype)
    mask = np.multiply(rng.uniform(0.0, 1.0, x.shape) >= rate, scale, dtype=x.data.dtype)

    def backward(g):
        _accumulate(x, g * mask)
    return _make(x.data * mask, (x,), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Normalize per channel; axis 1 is the channel axis for 2-D and 3-D input.

    Training mode normalizes with current-batch statistics (accumulated in
    float64) and folds them into the running estimates in place. Eval mode
    uses the running estimates only.
    """
    if x.data.ndim == 2:
        axes, stat_shape = (0,), (1, -1)
    elif x.data.ndim == 3:
        axes, stat_shape = (0, 2), (1, -1, 1)
    else:
        raise ShapeError(f"batch_norm expects 2-D or 3-D input, got {x.shape}")

    if training:
        mean64 = x.data.mean(axis=axes, dtype=np.float64)
        var64 = x.data.var(axis=axes, dtype=np.float64)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean64.astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1.0 - momentum) * var64.astype(running_var.dtype)
        mean = mean64.astype(x.data.dtype)
        inv = (1.0 / np.sqrt(var64 + eps)).astype(x.data.dtype)
    else:
        mean = running_mean.astype(x.data.dtype)
        inv = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(x.data.dtype)

    xhat = (x.data - mean.reshape(stat_shape)) * inv.reshape(stat_shape)
    out_data = xhat * gamma.data.reshape(stat_shape) + beta.data.reshape(stat_shape)

    def backward(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes, dtype=np.float64).astype(beta.data.dtype))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes, dtype=np.float64).astype(gamma.data.dtype))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(stat_shape)
            if training:
                m1 = gxhat.mean(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
                m2 = (gxhat * xhat).mean(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
                _accumulate(x, inv.reshape(stat_shape) * (gxhat - m1 - xhat * m2))
            else:
                _accumulate(x, gxhat * inv.reshape(stat_shape))
    return _make(out_data, (x, gamma, beta), backward)
