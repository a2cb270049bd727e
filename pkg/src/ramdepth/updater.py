"""Recurrent depth update and convex upsampling to full resolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, ops, record_op, GRUParams
from .matcher import CorrelationSample
from .model import ModelConfig


@dataclass
class DepthState:
    depth: Tensor   # (1, Hc, Wc), normalized scene units; zeros at step 0
    hidden: Tensor  # (Ch, Hc, Wc), values in (-1, 1); zeros at step 0
    step: int = 0

    @classmethod
    def initial(cls, hidden_dim: int, hc: int, wc: int) -> "DepthState":
        return cls(depth=Tensor(np.zeros((1, hc, wc), np.float32)),
                   hidden=Tensor(np.zeros((hidden_dim, hc, wc), np.float32)),
                   step=0)


@dataclass
class UpsampleMask:
    mask: Tensor  # (factor*factor*9, Hc, Wc), softmaxed over the 9-neighbor axis
    factor: int


def _relu_conv(x, params, name, padding):
    return ops.relu(ops.conv2d(x, params[name + ".w"], params[name + ".b"], padding=padding))


def _gru(name, params) -> GRUParams:
    return GRUParams(
        wz=params[f"{name}.wz"], bz=params[f"{name}.bz"],
        wr=params[f"{name}.wr"], br=params[f"{name}.br"],
        wh=params[f"{name}.wh"], bh=params[f"{name}.bh"],
    )


def recurrent_update(corr: CorrelationSample, context: Tensor, state: DepthState,
                     params, cfg: ModelConfig) -> DepthState:
    """One optimization step: new hidden state plus an additive depth update."""
    z, hc, wc = corr.scores.shape
    if context.shape[1:] != (hc, wc) or state.depth.shape[1:] != (hc, wc):
        raise ValueError("recurrent_update: spatially misaligned inputs")

    c = ops.reshape(corr.scores, (1, z, hc, wc))
    c = _relu_conv(c, params, "upd.corr0", 0)
    c = _relu_conv(c, params, "upd.corr1", 1)
    d = ops.reshape(state.depth, (1, 1, hc, wc))
    df = _relu_conv(d, params, "upd.dfeats0", 3)
    df = _relu_conv(df, params, "upd.dfeats1", 1)
    motion = _relu_conv(ops.concat([c, df], axis=1), params, "upd.motion", 1)

    ctx = ops.reshape(context, (1, context.shape[0], hc, wc))
    x = ops.concat([ctx, motion, d], axis=1)
    h = ops.reshape(state.hidden, (1, cfg.hidden_dim, hc, wc))
    h = ops.conv_gru(x, h, _gru("upd.gru0", params), kernel=(1, 5))
    h = ops.conv_gru(x, h, _gru("upd.gru1", params), kernel=(5, 1))

    dd = _relu_conv(h, params, "upd.delta0", 1)
    dd = ops.conv2d(dd, params["upd.delta1.w"], params["upd.delta1.b"], padding=1)
    new_depth = ops.add(state.depth, ops.reshape(dd, (1, hc, wc)))
    return DepthState(depth=new_depth,
                      hidden=ops.reshape(h, (cfg.hidden_dim, hc, wc)),
                      step=state.step + 1)


def predict_upmask(hidden: Tensor, context: Tensor, params, cfg: ModelConfig) -> UpsampleMask:
    """Convex-combination weights for upsampling, softmaxed per 3x3 neighborhood."""
    ch, hc, wc = hidden.shape
    f = cfg.downsample_factor
    x = ops.concat([hidden, context], axis=0)
    x = ops.reshape(x, (1, x.shape[0], hc, wc))
    x = _relu_conv(x, params, "up.conv0", 1)
    x = ops.conv2d(x, params["up.head.w"], params["up.head.b"])
    x = ops.reshape(x, (f * f, 9, hc, wc))
    x = ops.softmax(x, axis=1)
    return UpsampleMask(ops.reshape(x, (f * f * 9, hc, wc)), f)


def convex_upsample(depth: Tensor, mask: UpsampleMask, factor: int = 8) -> Tensor:
    """Upsample a coarse depth map by convex combinations of 3x3 neighborhoods.

    mask channel layout: channel (di*factor + dj)*9 + (ki*3 + kj) weights the
    coarse neighbor (ki-1, kj-1) for subpixel (di, dj). Borders use edge
    replication, so constant maps stay exactly constant.
    """
    if mask.factor != factor:
        raise ValueError(f"mask built for factor {mask.factor}, requested {factor}")
    _, hc, wc = depth.shape
    f2 = factor * factor
    if mask.mask.shape != (f2 * 9, hc, wc):
        raise ValueError(f"mask shape {mask.mask.shape} mismatches depth {depth.shape}")

    m = mask.mask
    pad = np.pad(depth.data[0], 1, mode="edge")
    neigh = np.empty((9, hc, wc), dtype=depth.dtype)
    for ki in range(3):
        for kj in range(3):
            neigh[ki * 3 + kj] = pad[ki:ki + hc, kj:kj + wc]

    mr = m.data.reshape(f2, 9, hc, wc)
    sub = (mr * neigh[None]).sum(axis=1)  # (f2, Hc, Wc)
    out = sub.reshape(factor, factor, hc, wc).transpose(2, 0, 3, 1).reshape(1, hc * factor, wc * factor)

    def bwd(g):
        gsub = g.reshape(hc, factor, wc, factor).transpose(1, 3, 0, 2).reshape(f2, hc, wc)
        dmask = (gsub[:, None] * neigh[None]).reshape(f2 * 9, hc, wc)
        dneigh = (mr * gsub[:, None]).sum(axis=0)  # (9, Hc, Wc)
        dpad = np.zeros((hc + 2, wc + 2), dtype=g.dtype)
        for ki in range(3):
            for kj in range(3):
                dpad[ki:ki + hc, kj:kj + wc] += dneigh[ki * 3 + kj]
        # fold replicated borders back onto the edges (rows first, then columns)
        dpad[1] += dpad[0]
        dpad[-2] += dpad[-1]
        dpad[:, 1] += dpad[:, 0]
        dpad[:, -2] += dpad[:, -1]
        return dpad[None, 1:-1, 1:-1].copy(), dmask

    return record_op([depth, m], out.astype(depth.dtype), bwd)
