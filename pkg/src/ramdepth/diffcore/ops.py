"""Differentiable operations on Tensors.

Only the op set the depth network needs. No broadcasting anywhere: the
elementwise ops require identical shapes, scalar variants are separate
functions. Image-like data is NCHW.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor import Tensor, record_op

__all__ = [
    "add", "sub", "mul", "neg", "scalar_mul", "scalar_add",
    "concat", "reshape", "transpose", "tile_batch", "sum_axis", "sum_all",
    "absolute", "clamp_min",
    "activation", "relu", "sigmoid", "tanh", "softmax",
    "conv2d", "norm2d", "grid_sample_bilinear", "GRUParams", "conv_gru",
]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


# ---------------------------------------------------------------------------
# elementwise / structural

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")
    return record_op([a, b], a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "sub")
    return record_op([a, b], a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op([a, b], ad * bd, lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return record_op([a], -a.data, lambda g: (-g,))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return record_op([a], a.data * np.asarray(s, dtype=a.dtype), lambda g: (g * s,))


def scalar_add(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return record_op([a], a.data + np.asarray(s, dtype=a.dtype), lambda g: (g,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record_op(tensors, np.concatenate([t.data for t in tensors], axis=axis), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return record_op([a], a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op([a], np.ascontiguousarray(a.data.transpose(axes)),
                     lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def tile_batch(a: Tensor, k: int) -> Tensor:
    """Repeat a (1, ...) tensor k times along the leading axis."""
    if a.shape[0] != 1:
        raise ValueError("tile_batch expects leading extent 1")
    out = np.repeat(a.data, k, axis=0)
    return record_op([a], out, lambda g: (g.sum(axis=0, keepdims=True),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    shape = a.shape

    def bwd(g):
        return (np.repeat(np.expand_dims(g, axis), shape[axis], axis=axis),)

    return record_op([a], a.data.sum(axis=axis), bwd)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return record_op(
        [a], np.asarray(a.data.sum(), dtype=a.dtype),
        lambda g: (np.full(shape, g, dtype=a.dtype),),
    )


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return record_op([a], np.abs(a.data), lambda g: (g * sign,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = (a.data >= lo).astype(a.dtype)
    return record_op([a], np.maximum(a.data, lo), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# activations

def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(x.dtype)
    return record_op([x], x.data * mask, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return record_op([x], y.astype(x.dtype), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record_op([x], y, lambda g: (g * (1.0 - y * y),))


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ValueError(f"softmax: invalid axis {axis} for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    y = y.astype(x.dtype)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return record_op([x], y, bwd)


def activation(kind: str, x: Tensor, axis: int | None = None) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "softmax":
        if axis is None:
            raise ValueError("softmax requires an axis")
        return softmax(x, axis)
    raise ValueError(f"unknown activation kind: {kind}")


# ---------------------------------------------------------------------------
# convolution

def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _zero_pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    # np.pad has high per-call overhead; a slice assign is much cheaper
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), x.dtype)
    out[:, :, ph:ph + h, pw:pw + w] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int):
    # xp: padded (N, C, Hp, Wp) -> (N, Ho, Wo, C*kh*kw)
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]  # (N, C, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)
    return cols, ho, wo


def _conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Pointwise convolution, n == 1: a plain channel-mixing matmul."""
    _, c, h, w = x.shape
    o = weight.shape[0]
    xm = x.data.reshape(c, h * w)
    w2 = weight.data.reshape(o, c)
    out = w2 @ xm
    if bias is not None:
        out += bias.data[:, None]
    inputs = [x, weight] + ([bias] if bias is not None else [])

    def bwd(g):
        g2 = g.reshape(o, h * w)
        dx = (w2.T @ g2).reshape(x.shape)
        dw = (g2 @ xm.T).reshape(weight.shape)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return record_op(inputs, out.reshape(1, o, h, w), bwd)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2D convolution (cross-correlation), NCHW input, OIKhKw weight."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d: input must be NCHW and weight OIKhKw")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {i}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValueError("conv2d: kernel larger than padded input")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({o},)")

    if kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0 and n == 1:
        return _conv1x1(x, weight, bias)

    inputs = [x, weight] + ([bias] if bias is not None else [])
    w2 = weight.data.reshape(o, -1)

    if n == 1:
        # single sample: compiled pad+im2col, one matmul, compiled col2im
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        cols = np.empty((c * kh * kw, ho * wo), x.dtype)
        _kernels.im2col_pad(np.ascontiguousarray(x.data[0]),
                            kh, kw, sh, sw, ph, pw, cols)
        out = w2 @ cols
        if bias is not None:
            out += bias.data[:, None]
        out = out.reshape(1, o, ho, wo)

        def bwd(g):
            g2 = g.reshape(o, -1)  # (O, Ho*Wo)
            dw = (g2 @ cols.T).reshape(weight.shape)
            dcols = w2.T @ g2
            dx = np.zeros((c, h, w), x.dtype)
            _kernels.col2im_pad(dcols, kh, kw, sh, sw, ph, pw, dx)
            grads = [dx.reshape(1, c, h, w), dw]
            if bias is not None:
                grads.append(g2.sum(axis=1))
            return tuple(grads)

        return record_op(inputs, out, bwd)

    xp = _zero_pad(x.data, ph, pw)
    cols, ho, wo = _im2col(xp, kh, kw, sh, sw)
    cols2 = cols.reshape(-1, c * kh * kw)
    out = cols2 @ w2.T  # (N*Ho*Wo, O)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        dw = (g2.T @ cols2).reshape(weight.shape)
        if sh == 1 and sw == 1:
            # input gradient is a full correlation of g with the flipped kernel
            gp = _zero_pad(g, kh - 1 - ph, kw - 1 - pw)
            gcols, _, _ = _im2col(gp, kh, kw, 1, 1)
            wf = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gcols2 = gcols.reshape(-1, o * kh * kw)
            dx = (gcols2 @ wf.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        else:
            dcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    dxp[:, :, a:a + sh * ho:sh, b:b + sw * wo:sw] += dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            dx = dxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return record_op(inputs, out, bwd)


# ---------------------------------------------------------------------------
# normalization

def norm2d(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "group",
           num_groups: int = 8, eps: float = 1e-5) -> Tensor:
    """Per-channel (batch-stat) or per-group normalization with affine."""
    if x.data.ndim != 4:
        raise ValueError("norm2d expects NCHW input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"norm2d: gamma/beta must have shape ({c},)")

    if mode == "batch-stat":
        # statistics per channel over (N, H, W)
        xr = x.data.transpose(1, 0, 2, 3).reshape(c, -1)  # (C, N*H*W)
        groups, back = c, None
    elif mode == "group":
        g = min(num_groups, c)
        if c % g != 0:
            raise ValueError(f"norm2d: {c} channels not divisible by {g} groups")
        xr = x.data.reshape(n * g, -1)  # (N*G, Cg*H*W)
        groups = n * g
    else:
        raise ValueError(f"norm2d: unknown mode {mode!r}")

    mean = xr.mean(axis=1, keepdims=True)
    var = xr.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat_r = (xr - mean) * inv
    if mode == "batch-stat":
        xhat = xhat_r.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    else:
        xhat = xhat_r.reshape(n, c, h, w)
    gm = gamma.data.reshape(1, c, 1, 1)
    out = (xhat * gm + beta.data.reshape(1, c, 1, 1)).astype(x.dtype)

    def bwd(g_out):
        dgamma = (g_out * xhat).sum(axis=(0, 2, 3))
        dbeta = g_out.sum(axis=(0, 2, 3))
        gx = g_out * gm  # grad wrt xhat
        if mode == "batch-stat":
            gxr = gx.transpose(1, 0, 2, 3).reshape(c, -1)
        else:
            gxr = gx.reshape(groups, -1)
        m = gxr.shape[1]
        mu_g = gxr.mean(axis=1, keepdims=True)
        mu_gx = (gxr * xhat_r).mean(axis=1, keepdims=True)
        dxr = inv * (gxr - mu_g - xhat_r * mu_gx)
        if mode == "batch-stat":
            dx = dxr.reshape(c, n, h, w).transpose(1, 0, 2, 3)
        else:
            dx = dxr.reshape(n, c, h, w)
        return np.ascontiguousarray(dx), dgamma, dbeta

    return record_op([x, gamma, beta], out, bwd)


# ---------------------------------------------------------------------------
# bilinear sampling

def grid_sample_bilinear(feat: Tensor, coords: Tensor) -> Tensor:
    """Sample feat (N,C,H,W) at coords (N,2,Hs,Ws) in pixel units.

    (0,0) is the center of the top-left pixel; u grows rightward, v
    downward. Samples beyond the pixel-center border fade to zero (each of
    the 4 neighboring centers outside the image contributes zero).
    """
    if feat.data.ndim != 4 or coords.data.ndim != 4 or coords.shape[1] != 2:
        raise ValueError("grid_sample_bilinear: feat must be NCHW, coords N2HsWs")
    if feat.shape[0] != coords.shape[0]:
        raise ValueError("grid_sample_bilinear: batch mismatch")
    n, c, h, w = feat.shape
    _, _, hs, ws = coords.shape

    ftype = feat.dtype
    u = coords.data[:, 0].reshape(n, hs * ws)
    v = coords.data[:, 1].reshape(n, hs * ws)
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    wx1 = (u - x0).astype(ftype)
    wy1 = (v - y0).astype(ftype)

    # compiled sequential loops per batch item: deterministic and free of
    # the (4, S, C) corner temporaries a vectorized gather needs
    flats = [np.ascontiguousarray(feat.data[b].transpose(1, 2, 0)).reshape(h * w, c)
             for b in range(n)]
    out_rows = np.zeros((n, hs * ws, c), ftype)
    for b in range(n):
        _kernels.bilinear_gather(flats[b], x0[b], y0[b], wx1[b], wy1[b], h, w,
                                 out_rows[b])
    out = np.ascontiguousarray(out_rows.transpose(0, 2, 1)).reshape(n, c, hs, ws)

    def bwd(g):
        gseq = np.ascontiguousarray(g.reshape(n, c, hs * ws).transpose(0, 2, 1))
        dflat = np.zeros((n, h * w, c), ftype)
        dcoords = np.empty((n, hs * ws, 2), ftype)
        for b in range(n):
            _kernels.bilinear_scatter(gseq[b], flats[b], x0[b], y0[b],
                                      wx1[b], wy1[b], h, w, dflat[b], dcoords[b])
        dfeat = np.ascontiguousarray(
            dflat.reshape(n, h, w, c).transpose(0, 3, 1, 2))
        dc = np.ascontiguousarray(
            dcoords.reshape(n, hs, ws, 2).transpose(0, 3, 1, 2))
        return dfeat, dc.astype(coords.dtype, copy=False)

    return record_op([feat, coords], out, bwd)


# ---------------------------------------------------------------------------
# convolutional GRU

@dataclass
class GRUParams:
    """Weights for one ConvGRU cell: update gate z, reset gate r, candidate."""
    wz: Tensor
    bz: Tensor
    wr: Tensor
    br: Tensor
    wh: Tensor
    bh: Tensor

    def tensors(self):
        return [self.wz, self.bz, self.wr, self.br, self.wh, self.bh]


def conv_gru(x: Tensor, h: Tensor, weights: GRUParams, kernel=(3, 3)) -> Tensor:
    """One ConvGRU step; returns the new hidden state.

    z = sigmoid(conv([x,h])), r = sigmoid(conv([x,h])),
    h~ = tanh(conv([x, r*h])), h' = (1-z)*h + z*h~.
    """
    if x.shape[0] != h.shape[0] or x.shape[2:] != h.shape[2:]:
        raise ValueError(f"conv_gru: x {x.shape} and h {h.shape} not aligned")
    kh, kw = _pair(kernel)
    pad = (kh // 2, kw // 2)
    xh = concat([x, h], axis=1)
    z = sigmoid(conv2d(xh, weights.wz, weights.bz, padding=pad))
    r = sigmoid(conv2d(xh, weights.wr, weights.br, padding=pad))
    cand_in = concat([x, mul(r, h)], axis=1)
    h_tilde = tanh(conv2d(cand_in, weights.wh, weights.bh, padding=pad))
    one_minus_z = scalar_add(neg(z), 1.0)
    return add(mul(one_minus_z, h), mul(z, h_tilde))
