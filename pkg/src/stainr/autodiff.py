"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a row-major numpy array. Operations executed while
gradients are enabled append an entry to the active ``GradTape``; calling
``backward`` on a scalar walks the tape in reverse and accumulates
gradients (by summation on fan-out) into every ``requires_grad`` tensor.

Arithmetic runs at whatever precision the operands carry: float64 in the
test suite, float32 during training. Forward ops are deterministic, so
identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import NumericError, ShapeError

# Enables the non-finite output check after every forward op.  Off by
# default: the scan costs a full pass over each result.
DEBUG_CHECKS = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """N-dimensional array participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

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

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the module-level functions do the real work.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class _TapeOp:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class GradTape:
    """Append-only record of forward operations for one execution context."""

    __slots__ = ("ops",)

    def __init__(self):
        self.ops = []

    def clear(self):
        self.ops.clear()

    def __len__(self):
        return len(self.ops)

    def __enter__(self):
        _state_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state_stack().pop()
        return False


_state = threading.local()


def _state_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suppresses tape recording (inference paths)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.grad_enabled = self._prev
        return False


def _active_tape():
    stack = _state_stack()
    if not stack:
        stack.append(GradTape())
    return stack[-1]


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out_data, inputs, vjp):
    """Wrap a forward result, recording the op if gradients are flowing."""
    if DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        finite_in = all(np.all(np.isfinite(t.data)) for t in inputs)
        origin = "finite inputs" if finite_in else "non-finite inputs"
        raise NumericError(f"non-finite values in op output ({origin})")
    req = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if req:
        tape = _active_tape()
        tape.ops.append(_TapeOp(out, inputs, vjp))
        out._tape = tape
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# elementwise and linear primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp)


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    _check_broadcast_leading(a, b)
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp)


def _check_broadcast_leading(a, b):
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not conform") from None


def texp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def sqrt(a):
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),))


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp)


def gelu(a):
    """Exact-erf form: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), vjp)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            shape = list(a.shape)
            for ax in axes:
                shape[ax % a.ndim] = 1
            gg = g.reshape(shape)
        return (np.broadcast_to(gg, a.shape),)

    return _make(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.data.size // out.size

    def vjp(g):
        gg = g / count
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            shape = list(a.shape)
            for ax in axes:
                shape[ax % a.ndim] = 1
            gg = gg.reshape(shape)
        return (np.broadcast_to(gg, a.shape),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# movement ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _make(out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp)


def slice_axis(a, axis, start, stop):
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(out, (a,), vjp)


def pad2d(a, pad):
    """Zero-pad the two trailing (spatial) axes by `pad` on every side."""
    a = _as_tensor(a)
    if pad == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, width)

    def vjp(g):
        sl = (Ellipsis, slice(pad, -pad), slice(pad, -pad))
        return (g[sl],)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# normalization ops
# ---------------------------------------------------------------------------

def softmax(a, axis):
    """Numerically stable softmax along `axis` (max-subtraction)."""
    a = _as_tensor(a)
    x = a.data
    out = x - x.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


def l2_normalize(a, axis=-1, eps=1e-8):
    """x / max(||x||, eps) along `axis`; zero vectors map to zero."""
    a = _as_tensor(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x / denom

    def vjp(g):
        gx = g / denom
        # The projection term only applies on the smooth branch.
        mask = norm > eps
        proj = (g * x).sum(axis=axis, keepdims=True) / (denom * denom * denom)
        return (gx - mask * x * proj,)

    return _make(out, (a,), vjp)


def layer_norm(a, gamma, beta, eps=1e-6):
    """Normalize over the trailing (channel) axis, then affine-transform."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    C = a.shape[-1]
    if C == 0:
        raise ShapeError("layer_norm: channel axis has size 0")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match channel count ({C},)")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _make(out, (a, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Dense 2-D convolution (cross-correlation), kernel size 1 or 3."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = _as_tensor(bias) if bias is not None else None
    B, Cin, H, W = x.shape
    Cout, Cw, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if Cw != Cin:
        raise ShapeError(f"conv2d: weight expects {Cw} input channels, input has {Cin}")
    if H < kh or W < kw:
        raise ShapeError(f"conv2d: input {H}x{W} smaller than kernel {kh}x{kw}")
    if (H + 2 * pad - kh) % stride or (W + 2 * pad - kw) % stride:
        raise ShapeError(
            f"conv2d: non-integral output size for input {H}x{W}, kernel {kh}, stride {stride}, pad {pad}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1

    if kh == 1:
        return _conv1x1(x, weight, bias, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Cin * kh * kw)
    cols = np.ascontiguousarray(cols)
    wmat = weight.data.reshape(Cout, Cin * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)

    def vjp(g):
        gcols = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, Cout)
        gw = (gcols.T @ cols).reshape(weight.shape)
        gx_cols = (gcols @ wmat).reshape(B, Ho, Wo, Cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((B, Cin, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
        for dy in range(kh):
            for dx in range(kw):
                gxp[:, :, dy:dy + stride * Ho:stride, dx:dx + stride * Wo:stride] += gx_cols[:, :, :, :, dy, dx]
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gcols.sum(axis=0))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, vjp)


def _conv1x1(x, weight, bias, stride, pad):
    B, Cin, H, W = x.shape
    Cout = weight.shape[0]
    xd = x.data
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if stride != 1:
        xd = xd[:, :, ::stride, ::stride]
    Ho, Wo = xd.shape[2], xd.shape[3]
    wmat = weight.data.reshape(Cout, Cin)
    flat = xd.reshape(B, Cin, Ho * Wo)
    out = np.matmul(wmat, flat)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(B, Cout, Ho, Wo)

    def vjp(g):
        gflat = g.reshape(B, Cout, Ho * Wo)
        gx_flat = np.matmul(wmat.T, gflat)
        gx_s = gx_flat.reshape(B, Cin, Ho, Wo)
        if stride != 1 or pad:
            gxp = np.zeros((B, Cin, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
            gxp[:, :, ::stride, ::stride] = gx_s
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        else:
            gx = gx_s
        gw = np.matmul(gflat, flat.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gflat.sum(axis=(0, 2)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, vjp)


def depthwise_conv2d(x, weight, bias=None):
    """3x3 depthwise convolution, stride 1, pad 1 (shape-preserving)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = _as_tensor(bias) if bias is not None else None
    B, C, H, W = x.shape
    if weight.shape != (C, 1, 3, 3):
        raise ShapeError(f"depthwise_conv2d: weight shape {weight.shape} does not match (C,1,3,3) with C={C}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    w = weight.data
    acc = np.zeros((B, C, H, W), dtype=x.data.dtype)
    tmp = np.empty_like(acc)
    for dy in range(3):
        for dx in range(3):
            np.multiply(xp[:, :, dy:dy + H, dx:dx + W],
                        w[:, 0, dy, dx][None, :, None, None], out=tmp)
            acc += tmp
    out = acc + bias.data[None, :, None, None] if bias is not None else acc

    def vjp(g):
        gw = np.empty_like(w)
        gxp = np.zeros_like(xp, dtype=g.dtype)
        tmp = np.empty_like(g)
        for dy in range(3):
            for dx in range(3):
                sl = xp[:, :, dy:dy + H, dx:dx + W]
                gw[:, 0, dy, dx] = np.einsum("bchw,bchw->c", g, sl)
                np.multiply(g, w[:, 0, dy, dx][None, :, None, None], out=tmp)
                gxp[:, :, dy:dy + H, dx:dx + W] += tmp
        gx = gxp[:, :, 1:-1, 1:-1]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, vjp)


# ---------------------------------------------------------------------------
# spatial rearrangement
# ---------------------------------------------------------------------------

def pixel_unshuffle(x, r):
    """[B,C,H,W] -> [B,C*r*r,H/r,W/r]; exact inverse of pixel_shuffle."""
    x = _as_tensor(x)
    B, C, H, W = x.shape
    if H % r or W % r:
        raise ShapeError(f"pixel_unshuffle: spatial size {H}x{W} not divisible by {r}")
    out = (x.data.reshape(B, C, H // r, r, W // r, r)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(B, C * r * r, H // r, W // r))

    def vjp(g):
        return (g.reshape(B, C, r, r, H // r, W // r)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(B, C, H, W),)

    return _make(out, (x,), vjp)


def pixel_shuffle(x, r):
    """[B,C*r*r,H,W] -> [B,C,H*r,W*r]; exact inverse of pixel_unshuffle."""
    x = _as_tensor(x)
    B, Crr, H, W = x.shape
    if Crr % (r * r):
        raise ShapeError(f"pixel_shuffle: channel count {Crr} not divisible by r*r={r * r}")
    C = Crr // (r * r)
    out = (x.data.reshape(B, C, r, r, H, W)
           .transpose(0, 1, 4, 2, 5, 3)
           .reshape(B, C, H * r, W * r))

    def vjp(g):
        return (g.reshape(B, C, H, r, W, r)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(B, Crr, H, W),)

    return _make(out, (x,), vjp)


def unfold_windows(x, win, stride, pad):
    """Extract (possibly overlapping) spatial windows.

    [B,C,H,W] -> [B,nH,nW,C,win,win] where windows start every `stride`
    pixels on the zero-padded input.
    """
    x = _as_tensor(x)
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    if (Hp - win) % stride or (Wp - win) % stride:
        raise ShapeError(
            f"unfold_windows: padded size {Hp}x{Wp} incompatible with window {win}, stride {stride}")
    view = sliding_window_view(xp, (win, win), axis=(2, 3))[:, :, ::stride, ::stride]
    nH, nW = view.shape[2], view.shape[3]
    out = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5))

    def vjp(g):
        gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
        for i in range(nH):
            for j in range(nW):
                gxp[:, :, i * stride:i * stride + win, j * stride:j * stride + win] += g[:, i, j]
        if pad:
            return (gxp[:, :, pad:-pad, pad:-pad],)
        return (gxp,)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# backward pass and verification
# ---------------------------------------------------------------------------

def backward(loss, clear=True):
    """Populate `.grad` on every requires_grad tensor reachable from `loss`.

    Gradients accumulate by summation, both across fan-out within one pass
    and across repeated backward calls. The recording tape is cleared
    afterwards unless `clear=False`.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
            return
        raise NumericError("backward: loss is detached from any gradient tape")
    loss.grad = np.ones_like(loss.data)
    for op in reversed(tape.ops):
        g = op.out.grad
        if g is None:
            continue
        grads = op.vjp(g)
        for t, gt in zip(op.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            _accumulate(t, gt)
        if op.out is not loss:
            op.out.grad = None
    if clear:
        tape.clear()


def _accumulate(t, gt):
    if t.grad is None:
        if gt.base is not None or not gt.flags.owndata:
            gt = gt.copy()
        t.grad = gt
    else:
        t.grad = t.grad + gt


class GradcheckReport:
    """Outcome of one finite-difference check."""

    __slots__ = ("max_rel_error", "passed", "tol")

    def __init__(self, max_rel_error, passed, tol):
        self.max_rel_error = max_rel_error
        self.passed = passed
        self.tol = tol

    def __repr__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"GradcheckReport({status}, max_rel_error={self.max_rel_error:.3e}, tol={self.tol})"


def gradcheck(f, inputs, h=1e-5, tol=1e-3, abs_floor=1e-6, seed=0):
    """Compare analytic gradients of `f` against central finite differences.

    `f` maps the tensors in `inputs` to a Tensor of any shape; the output
    is contracted with a fixed random projection so a single scalar drives
    both routes. Every requires_grad input is perturbed coordinate by
    coordinate. Use float64 inputs; float32 cannot survive h=1e-5.
    """
    inputs = list(inputs)
    for t in inputs:
        # Perturbation below writes through a flat view of the data.
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
    with GradTape():
        y0 = f(*inputs)
        rng = np.random.default_rng(seed)
        proj = rng.standard_normal(y0.shape)
        loss = tsum(mul(y0, Tensor(proj, dtype=y0.data.dtype)))
        with no_grad():
            y1 = f(*inputs)
        if not np.array_equal(y0.data, y1.data):
            raise NumericError("gradcheck: function is non-deterministic (double evaluation mismatch)")
        for t in inputs:
            t.zero_grad()
        backward(loss, clear=False)

    def eval_proj():
        with no_grad():
            return float((f(*inputs).data * proj).sum())

    max_rel = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = eval_proj()
            flat[i] = orig - h
            fm = eval_proj()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            if rel > max_rel:
                max_rel = rel
    for t in inputs:
        t.zero_grad()
    return GradcheckReport(max_rel, max_rel <= tol, tol)
