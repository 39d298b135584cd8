"""Composite and fused ops built on the tensor core: convolutions, sorting, norms."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    logsigmoid,
    make_op,
    mean,
    softplus,
    sqrt,
    square,
    unbroadcast,
)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[B,C,Hp,Wp] -> [B, C*kh*kw, Ho*Wo] (channel-first columns)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    b, c = xp.shape[:2]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; ``shape`` is the padded input shape."""
    b, c = shape[:2]
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros(shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[B,Cin,H,W]`` with ``w[Cout,Cin,kh,kw]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x[B,C,H,W] and w[O,C,kh,kw]")
    b, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {cin_w}")
    if pad < 0 or stride < 1:
        raise ValueError("conv2d needs pad >= 0 and stride >= 1")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wmat = w.data.reshape(cout, -1)
    direct = kh == kw == 1 and stride == 1 and pad == 0
    if direct:
        cols = xp.reshape(b, cin, h * wd)
    else:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.matmul(wmat, cols).reshape(b, cout, ho, wo)

    def bw(g):
        gm = g.reshape(b, cout, ho * wo)
        gw = None
        if w.requires_grad:
            gw = np.einsum("bop,bkp->ok", gm, cols, optimize=True).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm)
            if direct:
                gx = gcols.reshape(x.shape)
            else:
                gxp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
                gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw

    y = make_op("conv2d", out, (x, w), bw)
    if bias is not None:
        y = y + as_tensor(bias).reshape(1, cout, 1, 1)
    return y


def conv_transpose2d(x, w, bias=None, stride: int = 2, pad: int = 1, output_padding: int = 0) -> Tensor:
    """Transposed convolution; ``w[Cin,Cout,kh,kw]``.

    Output extent is ``(H-1)*stride - 2*pad + kh + output_padding``.
    """
    x, w = as_tensor(x), as_tensor(w)
    b, cin, h, wd = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv_transpose2d: input has {cin} channels, kernel expects {cin_w}")
    hf = (h - 1) * stride + kh + output_padding
    wf = (wd - 1) * stride + kw + output_padding
    ho, wo = hf - 2 * pad, wf - 2 * pad
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d: padding removes the whole output")
    xm = x.data.reshape(b, cin, h * wd)
    wmat = w.data.reshape(cin, -1)
    buf = _col2im(np.matmul(wmat.T, xm), (b, cout, hf, wf), kh, kw, stride, h, wd)
    out = buf[:, :, pad:pad + ho, pad:pad + wo]

    def bw(g):
        gbuf = np.zeros((b, cout, hf, wf))
        gbuf[:, :, pad:pad + ho, pad:pad + wo] = g
        gcols = _im2col(gbuf, kh, kw, stride, h, wd)
        gx = np.matmul(wmat, gcols).reshape(x.shape) if x.requires_grad else None
        gw = np.einsum("bcp,bkp->ck", xm, gcols, optimize=True).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    y = make_op("conv_transpose2d", np.ascontiguousarray(out), (x, w), bw)
    if bias is not None:
        y = y + as_tensor(bias).reshape(1, cout, 1, 1)
    return y


def sort(x, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Ascending sort along ``axis``; returns values and the gather permutation.

    ``sorted == take_along_axis(x, perm, axis)``; backward scatters through perm.
    """
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise ValueError("sort: NaN in input")
    perm = np.argsort(x.data, axis=axis, kind="stable")
    out = np.take_along_axis(x.data, perm, axis=axis)

    def bw(g):
        gx = np.empty_like(g)
        np.put_along_axis(gx, perm, g, axis=axis)
        return (gx,)

    return make_op("sort", out, (x,), bw), perm


def sort_with_backward(x) -> tuple[Tensor, list[int]]:
    x = as_tensor(x)
    if x.ndim != 1:
        raise ShapeError("sort_with_backward expects a 1-D tensor")
    values, perm = sort(x, axis=0)
    return values, perm.tolist()


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis. Fused for speed; matches the composite form."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    y = make_op("layer_norm", xhat, (x,), bw)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """GroupNorm over ``x[B,C,...]``."""
    x = as_tensor(x)
    b, c = x.shape[:2]
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    shape = x.shape

    def bw(g):
        g = g.reshape(b, groups, -1)
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return ((inv * (g - gm - xhat * gxm)).reshape(shape),)

    y = make_op("group_norm", xhat.reshape(shape), (x,), bw)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if weight is not None:
        y = y * as_tensor(weight).reshape(bshape)
    if bias is not None:
        y = y + as_tensor(bias).reshape(bshape)
    return y


def mse_loss(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    return mean(square(a - b))


def bce_with_logits(logits, target) -> Tensor:
    """Mean binary cross-entropy ``softplus(l) - t*l``; ``target`` is a scalar or an array in [0, 1]."""
    logits = as_tensor(logits)
    t = np.asarray(target, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("bce targets must lie in [0, 1]")
    if t.ndim == 0 and t == 1:
        return -mean(logsigmoid(logits))
    if t.ndim == 0 and t == 0:
        return -mean(logsigmoid(-logits))
    return mean(softplus(logits) - logits * t)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    b, c, h, w = x.shape

    def bw(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_op("upsample_nearest", out, (x,), bw)


def layer_norm_composite(x, eps: float = 1e-5) -> Tensor:
    """Literal composite layer norm, used to cross-check the fused version."""
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(square(xc), axis=-1, keepdims=True)
    return xc / sqrt(var + eps)


__all__ = [
    "bce_with_logits",
    "conv2d",
    "conv_transpose2d",
    "group_norm",
    "layer_norm",
    "layer_norm_composite",
    "mse_loss",
    "sort",
    "sort_with_backward",
    "unbroadcast",
    "upsample_nearest",
]
