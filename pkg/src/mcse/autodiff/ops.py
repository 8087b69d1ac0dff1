"""Differentiable operator catalog.

Every public op takes :class:`Tensor` (or array-like) inputs, computes the
forward value with numpy and registers a closure producing input gradients.
The catalog is closed: :func:`op_forward` dispatches by name and rejects
anything not registered in ``OPS``.

Layouts: 2-D feature maps are ``(B, C, H, W)``; sequences are channels-last
``(S, L, C)``.
"""

from __future__ import annotations

import builtins
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .tensor import ShapeError, Tensor, UnsupportedOpError, as_tensor

OPS: dict[str, Callable[..., Tensor]] = {}


def register(name: str, variadic: bool = False):
    def deco(fn):
        OPS[name] = fn
        fn.op_name = name
        fn.variadic = variadic
        return fn
    return deco


def op_forward(op: str, inputs: Sequence, **attrs) -> Tensor:
    """Run catalog operator ``op`` on ``inputs``."""
    try:
        fn = OPS[op]
    except KeyError:
        raise UnsupportedOpError(f"unknown operator '{op}'") from None
    if fn.variadic:
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


def _t(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return as_tensor(x, dtype=like.dtype if like is not None else None)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

@register("add")
def add(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return Tensor.from_op(out, (a, b), backward, "add")


@register("sub")
def sub(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return Tensor.from_op(out, (a, b), backward, "sub")


@register("mul")
def mul(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb
    return Tensor.from_op(out, (a, b), backward, "mul")


@register("reciprocal")
def reciprocal(a) -> Tensor:
    a = _t(a)
    out = 1.0 / a.data

    def backward(g):
        return (-g * out * out,)
    return Tensor.from_op(out, (a,), backward, "reciprocal")


@register("power")
def power(a, p: float) -> Tensor:
    """``a ** p`` for a constant exponent; ``a`` must be non-negative unless ``p`` is integral."""
    a = _t(a)
    p = float(p)
    out = np.power(a.data, p)

    def backward(g):
        if p == 1.0:
            return (g,)
        return (g * p * np.power(a.data, p - 1.0),)
    return Tensor.from_op(out, (a,), backward, "power", {"p": p})


@register("square")
def square(a) -> Tensor:
    a = _t(a)
    out = a.data * a.data

    def backward(g):
        return (2.0 * g * a.data,)
    return Tensor.from_op(out, (a,), backward, "square")


@register("abs")
def abs(a) -> Tensor:
    a = _t(a)
    out = np.abs(a.data)

    def backward(g):
        return (g * np.sign(a.data),)
    return Tensor.from_op(out, (a,), backward, "abs")


@register("exp")
def exp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)
    return Tensor.from_op(out, (a,), backward, "exp")


@register("cos")
def cos(a) -> Tensor:
    a = _t(a)
    out = np.cos(a.data)

    def backward(g):
        return (-g * np.sin(a.data),)
    return Tensor.from_op(out, (a,), backward, "cos")


@register("sin")
def sin(a) -> Tensor:
    a = _t(a)
    out = np.sin(a.data)

    def backward(g):
        return (g * np.cos(a.data),)
    return Tensor.from_op(out, (a,), backward, "sin")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


@register("sigmoid")
def sigmoid(a) -> Tensor:
    a = _t(a)
    out = _sigmoid(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)
    return Tensor.from_op(out, (a,), backward, "sigmoid")


@register("softplus")
def softplus(a) -> Tensor:
    a = _t(a)
    out = _softplus(a.data)

    def backward(g):
        return (g * _sigmoid(a.data),)
    return Tensor.from_op(out, (a,), backward, "softplus")


@register("silu")
def silu(a) -> Tensor:
    a = _t(a)
    s = _sigmoid(a.data)
    out = a.data * s

    def backward(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)
    return Tensor.from_op(out, (a,), backward, "silu")


@register("prelu")
def prelu(a, slope, axis: int = 1) -> Tensor:
    """Parametric ReLU with one slope per entry along ``axis``."""
    a, slope = _t(a), _t(slope)
    shape = [1] * a.ndim
    shape[axis] = -1
    s = slope.data.reshape(shape)
    pos = a.data > 0
    out = np.where(pos, a.data, s * a.data)

    def backward(g):
        ga = np.where(pos, g, s * g)
        red = tuple(i for i in range(a.ndim) if i != axis % a.ndim)
        gs = np.where(pos, 0.0, g * a.data).sum(axis=red).astype(a.dtype, copy=False)
        return ga, gs.reshape(slope.shape)
    return Tensor.from_op(out, (a, slope), backward, "prelu", {"axis": axis})


@register("atan2")
def atan2(y, x, eps: float = 0.0) -> Tensor:
    """Elementwise angle of (x, y) in (-pi, pi]; (0, 0) maps to 0 with zero gradient."""
    y, x = _t(y), _t(x, y)
    out = np.arctan2(y.data, x.data)
    out[out <= -np.pi] = np.pi   # -0.0 imaginary part on the negative real axis
    r2 = x.data * x.data + y.data * y.data + eps
    safe = np.where(r2 > 0, r2, 1.0)

    def backward(g):
        k = np.where(r2 > 0, g / safe, 0.0)
        return k * x.data, -k * y.data
    return Tensor.from_op(out, (y, x), backward, "atan2", {"eps": eps})


# -- shape ---------------------------------------------------------------------

@register("reshape")
def reshape(a, shape) -> Tensor:
    a = _t(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)
    return Tensor.from_op(out, (a,), backward, "reshape", {"shape": tuple(shape)})


@register("permute")
def permute(a, axes) -> Tensor:
    a = _t(a)
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)
    return Tensor.from_op(out, (a,), backward, "permute", {"axes": axes})


@register("flip")
def flip(a, axis: int) -> Tensor:
    a = _t(a)
    out = np.ascontiguousarray(np.flip(a.data, axis=axis))

    def backward(g):
        return (np.ascontiguousarray(np.flip(g, axis=axis)),)
    return Tensor.from_op(out, (a,), backward, "flip", {"axis": axis})


@register("concat", variadic=True)
def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        idx = [builtins.slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = builtins.slice(lo, hi)
            grads.append(np.ascontiguousarray(g[tuple(idx)]))
        return grads
    return Tensor.from_op(out, tensors, backward, "concat", {"axis": axis})


@register("getitem")
def getitem(a, idx) -> Tensor:
    """Basic (slice / integer) indexing."""
    a = _t(a)
    out = np.ascontiguousarray(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)
    return Tensor.from_op(out, (a,), backward, "getitem", {"idx": idx})


def slice(a, axis: int, start: int, stop: int) -> Tensor:
    idx = [builtins.slice(None)] * _t(a).ndim
    idx[axis] = builtins.slice(start, stop)
    return getitem(a, tuple(idx))


@register("pad")
def pad(a, widths) -> Tensor:
    """Zero padding; ``widths`` as for ``np.pad``."""
    a = _t(a)
    out = np.pad(a.data, widths)
    idx = tuple(builtins.slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))

    def backward(g):
        return (np.ascontiguousarray(g[idx]),)
    return Tensor.from_op(out, (a,), backward, "pad", {"widths": widths})


# -- reductions / products -----------------------------------------------------

@register("sum")
def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return Tensor.from_op(out, (a,), backward, "sum", {"axis": axis, "keepdims": keepdims})


@register("mean")
def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)
    return Tensor.from_op(out, (a,), backward, "mean", {"axis": axis, "keepdims": keepdims})


@register("matmul")
def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _t(a), _t(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb
    return Tensor.from_op(out, (a, b), backward, "matmul")


@register("dense")
def dense(x, weight, bias=None) -> Tensor:
    """Affine map on the last axis: ``x @ weight + bias``, weight is (in, out)."""
    x, weight = _t(x), _t(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"dense: input features {x.shape[-1]} != weight rows {weight.shape[0]}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ weight.data)
    if bias is not None:
        bias = _t(bias)
        out += bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    return Tensor.from_op(out, parents, backward, "dense")


# -- normalization ---------------------------------------------------------------

@register("instance_norm")
def instance_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane of a (B, C, H, W) map, then scale/shift."""
    x = _t(x)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects (B, C, H, W), got {x.shape}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [x]
    out = xhat
    if weight is not None:
        weight, bias = _t(weight), _t(bias)
        out = xhat * weight.data.reshape(1, -1, 1, 1) + bias.data.reshape(1, -1, 1, 1)
        parents += [weight, bias]
    n = x.shape[2] * x.shape[3]

    def backward(g):
        if weight is not None:
            gw = (g * xhat).sum(axis=(0, 2, 3))
            gb = g.sum(axis=(0, 2, 3))
            gxh = g * weight.data.reshape(1, -1, 1, 1)
        else:
            gxh = g
        gx = inv / n * (n * gxh - gxh.sum(axis=(2, 3), keepdims=True)
                        - xhat * (gxh * xhat).sum(axis=(2, 3), keepdims=True))
        if weight is None:
            return (gx,)
        return gx, gw, gb
    return Tensor.from_op(out, parents, backward, "instance_norm", {"eps": eps})


# -- convolutions ------------------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(xp: np.ndarray, kh, kw, sh, sw, dh, dw, ho, wo) -> np.ndarray:
    """(B, C, Hp, Wp) padded map -> (B, C, kh, kw, ho, wo) patch view (copied)."""
    b, c, _, _ = xp.shape
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, kh, kw, ho, wo),
        strides=(s[0], s[1], s[2] * dh, s[3] * dw, s[2] * sh, s[3] * sw), writeable=False)
    return np.ascontiguousarray(view)


def _col2im(cols: np.ndarray, hp, wp, kh, kw, sh, sw, dh, dw) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add (B, C, kh, kw, ho, wo) patches into (B, C, hp, wp)."""
    b, c, _, _, ho, wo = cols.shape
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            h0, w0 = i * dh, j * dw
            out[:, :, h0:h0 + sh * (ho - 1) + 1:sh, w0:w0 + sw * (wo - 1) + 1:sw] += cols[:, :, i, j]
    return out


def _conv_out(n, k, s, d, p0, p1):
    return (n + p0 + p1 - d * (k - 1) - 1) // s + 1


@register("conv2d")
def conv2d(x, weight, bias=None, stride=1, dilation=1, padding=0) -> Tensor:
    """2-D cross-correlation.  weight (O, C, kh, kw); padding int, pair or ((top, bottom), (left, right))."""
    x, weight = _t(x), _t(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    sh, sw = _pair(stride)
    dh, dw = _pair(dilation)
    if isinstance(padding, (tuple, list)) and isinstance(padding[0], (tuple, list)):
        (pt, pb), (pl, pr) = padding
    else:
        ph, pw = _pair(padding)
        pt = pb = ph
        pl = pr = pw
    o, c, kh, kw = weight.shape
    b, _, h, w = x.shape
    ho = _conv_out(h, kh, sh, dh, pt, pb)
    wo = _conv_out(w, kw, sw, dw, pl, pr)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: empty output for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    cols = _im2col(xp, kh, kw, sh, sw, dh, dw, ho, wo).reshape(b, c * kh * kw, ho * wo)
    w2 = weight.data.reshape(o, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        bias = _t(bias)
        out += bias.data[None, :, None]
    out = out.reshape(b, o, ho, wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(b, o, ho * wo)
        gx = gw = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(b, c, kh, kw, ho, wo)
            gxp = _col2im(gcols, xp.shape[2], xp.shape[3], kh, kw, sh, sw, dh, dw)
            gx = np.ascontiguousarray(gxp[:, :, pt:pt + h, pl:pl + w])
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))
    attrs = {"stride": (sh, sw), "dilation": (dh, dw), "padding": ((pt, pb), (pl, pr))}
    return Tensor.from_op(out, parents, backward, "conv2d", attrs)


@register("conv_transpose2d")
def conv_transpose2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Transposed 2-D convolution.  weight (C_in, C_out, kh, kw); ``padding`` crops the full output."""
    x, weight = _t(x), _t(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ci, co, kh, kw = weight.shape
    b, _, h, w = x.shape
    hf, wf = (h - 1) * sh + kh, (w - 1) * sw + kw
    w2 = weight.data.reshape(ci, co * kh * kw)
    x2 = x.data.reshape(b, ci, h * w)
    cols = np.matmul(w2.T, x2).reshape(b, co, kh, kw, h, w)
    full = _col2im(cols, hf, wf, kh, kw, sh, sw, 1, 1)
    out = np.ascontiguousarray(full[:, :, ph:hf - ph, pw:wf - pw])
    if bias is not None:
        bias = _t(bias)
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gfull = np.zeros((b, co, hf, wf), dtype=g.dtype)
        gfull[:, :, ph:hf - ph, pw:wf - pw] = g
        gcols = _im2col(gfull, kh, kw, sh, sw, 1, 1, h, w).reshape(b, co * kh * kw, h * w)
        gx = np.matmul(w2, gcols).reshape(x.shape) if x.requires_grad else None
        gw = np.matmul(x2, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) \
            if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))
    return Tensor.from_op(out, parents, backward, "conv_transpose2d",
                          {"stride": (sh, sw), "padding": (ph, pw)})


@register("depthwise_conv1d")
def depthwise_conv1d(x, weight, bias=None, causal: bool = True) -> Tensor:
    """Per-channel 1-D convolution over the sequence axis of (S, L, D).

    weight is (D, K).  Causal mode left-pads K-1 zeros so step t only sees
    steps <= t; otherwise padding is split (K-1)//2 left, remainder right.
    """
    x, weight = _t(x), _t(weight)
    s, length, d = x.shape
    if weight.shape[0] != d:
        raise ShapeError(f"depthwise_conv1d: {d} channels vs weight {weight.shape}")
    k = weight.shape[1]
    left = k - 1 if causal else (k - 1) // 2
    right = k - 1 - left
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[:, j:j + length, :] * weight.data[:, j]
    if bias is not None:
        bias = _t(bias)
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        for j in range(k):
            gxp[:, j:j + length, :] += g * weight.data[:, j]
            gw[:, j] = (g * xp[:, j:j + length, :]).sum(axis=(0, 1))
        gx = np.ascontiguousarray(gxp[:, left:left + length, :])
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))
    return Tensor.from_op(out, parents, backward, "depthwise_conv1d", {"causal": causal})


@register("conv_transpose1d")
def conv_transpose1d(x, weight, bias=None, crop=(0, 0)) -> Tensor:
    """Stride-1 transposed convolution over the sequence axis of (S, L, C_in).

    weight is (C_in, C_out, K); the full output of length L+K-1 is cropped by
    ``crop = (left, right)``.
    """
    x, weight = _t(x), _t(weight)
    s, length, ci = x.shape
    if weight.shape[0] != ci:
        raise ShapeError(f"conv_transpose1d: {ci} input channels vs weight {weight.shape}")
    _, co, k = weight.shape
    cl, cr = crop
    lf = length + k - 1
    x2 = x.data.reshape(-1, ci)
    full = np.zeros((s, lf, co), dtype=x.data.dtype)
    taps = (x2 @ weight.data.reshape(ci, co * k)).reshape(s, length, co, k)
    for j in range(k):
        full[:, j:j + length, :] += taps[..., j]
    out = np.ascontiguousarray(full[:, cl:lf - cr, :])
    if bias is not None:
        bias = _t(bias)
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gfull = np.zeros((s, lf, co), dtype=g.dtype)
        gfull[:, cl:lf - cr, :] = g
        # stack the k shifted windows so both products are single matmuls
        gwin = np.empty((s, length, co, k), dtype=g.dtype)
        for j in range(k):
            gwin[..., j] = gfull[:, j:j + length, :]
        gwin = gwin.reshape(-1, co * k)
        gx = gwin @ weight.data.reshape(ci, co * k).T
        gw = (x2.T @ gwin).reshape(weight.shape)
        if bias is None:
            return gx.reshape(x.shape), gw
        return gx.reshape(x.shape), gw, g.sum(axis=(0, 1))
    return Tensor.from_op(out, parents, backward, "conv_transpose1d", {"crop": tuple(crop)})
