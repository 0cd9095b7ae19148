"""Differentiable primitive operations.

Elementwise binary ops accept operands of equal shape, a scalar, or an operand
whose shape is a suffix of the other (leading batch dims only).  Anything else
needs an explicit :func:`expand`.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import ShapeError, Tensor, as_tensor, make


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim == 0 or b.size == 1 and b.ndim == 0:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} need an explicit expand")


def _binary_operands(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_elementwise(a, b, "add")
    return make("add", a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_elementwise(a, b, "sub")
    return make("sub", a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_elementwise(a, b, "mul")
    return make("mul", a.data * b.data, (a, b),
                lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_elementwise(a, b, "div")
    out = a.data / b.data
    return make("div", out, (a, b),
                lambda g: (_unbroadcast(g / b.data, a.shape),
                           _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return make("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return make("power", out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out = np.exp(a.data)
    return make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make("log", out, (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    out = (x * cdf).astype(a.dtype)
    return make("gelu", out, (a,), lambda g: ((g * (cdf + x * pdf)).astype(a.dtype),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


# -- reductions ---------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make("sum", np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum(a, axis, keepdims) * (1.0 / count)


# -- shape manipulation -------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                lambda g: (g.transpose(inv),))


def expand(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if len(shape) != a.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    out = np.broadcast_to(a.data, shape).copy()
    return make("expand", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing only; advanced indexing is rejected."""
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not (isinstance(ix, (slice, int)) or ix is Ellipsis):
            raise TypeError(f"getitem supports slices and ints only, got {type(ix).__name__}")
    out = a.data[index].copy()

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return make("getitem", out, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: {ref.shape} vs {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return make("concat", out, tuple(tensors), bw)


def _pad_index(n: int, before: int, after: int, mode: str) -> np.ndarray:
    idx = np.arange(-before, n + after)
    if mode == "reflect":
        if before >= n or after >= n:
            raise ValueError(f"reflect padding {before},{after} too large for size {n}")
        idx = np.abs(idx)
        idx = np.where(idx > n - 1, 2 * (n - 1) - idx, idx)
    elif mode == "replicate":
        idx = np.clip(idx, 0, n - 1)
    else:
        raise ValueError(f"unknown pad mode {mode!r}")
    return idx


def pad2d(a: Tensor, amounts, mode: str = "zeros") -> Tensor:
    """Pad the last two axes. ``amounts`` = (top, bottom, left, right)."""
    top, bottom, left, right = amounts
    if min(amounts) < 0:
        raise ValueError(f"pad2d: negative amounts {amounts}")
    H, W = a.shape[-2:]
    if mode == "zeros":
        width = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
        out = np.pad(a.data, width)
        return make("pad2d", out, (a,), lambda g: (g[..., top:top + H, left:left + W],))
    rows = _pad_index(H, top, bottom, mode)
    cols = _pad_index(W, left, right, mode)
    out = a.data[..., rows[:, None], cols[None, :]]

    def bw(g):
        full = np.zeros_like(a.data)
        lead = full.reshape(-1, H, W)
        gl = g.reshape(-1, len(rows), len(cols))
        for k in range(lead.shape[0]):
            np.add.at(lead[k], (rows[:, None], cols[None, :]), gl[k])
        return (lead.reshape(a.shape),)

    return make("pad2d", out, (a,), bw)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return make("matmul", out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1: stride, : (Wo - 1) * stride + 1: stride]
    # (B, C, Ho, Wo, kh, kw) -> (B, C, kh, kw, Ho, Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation via im2col + batched matmul."""
    B, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    if C % groups or O % groups or Cg != C // groups:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}, groups={groups}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")
    span_h, span_w = H + 2 * padding - kh, W + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ValueError(f"conv2d: non-integral output size for input {H}x{W}, kernel {kh}x{kw}, "
                         f"stride {stride}, pad {padding}")
    Ho, Wo = span_h // stride + 1, span_w // stride + 1
    g, Og = groups, O // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, Ho, Wo).reshape(B, g, Cg * kh * kw, Ho * Wo)
    wmat = weight.data.reshape(g, Og, Cg * kh * kw)
    out = np.matmul(wmat[None], cols).reshape(B, O, Ho, Wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(gout):
        gm = gout.reshape(B, g, Og, Ho * Wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(gm, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            dcols = np.matmul(np.swapaxes(wmat, -1, -2)[None], gm).reshape(B, C, kh, kw, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + (Ho - 1) * stride + 1:stride,
                        j:j + (Wo - 1) * stride + 1:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if bias is not None:
            gb = gout.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make("conv2d", out, inputs, bw)


# -- normalisation / attention helpers ----------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs feature dim {D}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(x.ndim - 1))
        dxhat = g * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make("layer_norm", out, (x, gamma, beta), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return make("softmax", out, (x,),
                lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# -- resampling ---------------------------------------------------------------

def bilinear_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, align-corners=False / half-pixel centres."""
    if n_in <= 0 or n_out <= 0:
        raise ValueError(f"bilinear resize needs positive sizes, got {n_in} -> {n_out}")
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    H, W = x.shape[-2:]
    if (H, W) == (out_h, out_w):
        return x
    rh = bilinear_matrix(H, out_h, x.dtype)
    rw = bilinear_matrix(W, out_w, x.dtype)
    out = np.matmul(np.matmul(rh, x.data), rw.T)
    return make("bilinear_resize", out, (x,), lambda g: (np.matmul(np.matmul(rh.T, g), rw),))


# -- losses -------------------------------------------------------------------

def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy in the stable logit form."""
    z = logits.data
    t = np.asarray(target, dtype=z.dtype)
    if t.shape != z.shape:
        raise ShapeError(f"bce: logits {z.shape} vs target {t.shape}")
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.mean(), dtype=z.dtype)
    n = z.size

    def bw(g):
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return ((g * (p - t) / n).astype(z.dtype),)

    return make("bce_with_logits", out, (logits,), bw)
