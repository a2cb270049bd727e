"""Compiled inner loops for the hottest ops.

Plain sequential loops JIT-compiled with numba: deterministic (fixed
iteration order, no threading) and free of the large temporaries the
vectorized numpy formulations need. Each kernel specializes per dtype, so
float32 training and float64 gradient checks share one implementation.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def bilinear_gather(flat, x0, y0, wx1, wy1, h, w, out):
    """flat: (H*W, C); x0,y0,wx1,wy1: (S,) sample corners/weights; out: (S, C)."""
    s_total, c = out.shape
    for s in range(s_total):
        xa = x0[s]
        ya = y0[s]
        fx = wx1[s]
        fy = wy1[s]
        for dy in range(2):
            yy = ya + dy
            if yy < 0 or yy >= h:
                continue
            wy = fy if dy == 1 else 1.0 - fy
            for dx in range(2):
                xx = xa + dx
                if xx < 0 or xx >= w:
                    continue
                wgt = wy * (fx if dx == 1 else 1.0 - fx)
                row = yy * w + xx
                for ch in range(c):
                    out[s, ch] += wgt * flat[row, ch]


@njit(cache=True)
def bilinear_scatter(gflat, flat, x0, y0, wx1, wy1, h, w, dflat, dcoords):
    """Backward of bilinear_gather.

    gflat: (S, C) output gradient; flat: (H*W, C) forward features;
    dflat: (H*W, C) feature gradient (accumulated); dcoords: (S, 2).
    """
    s_total, c = gflat.shape
    for s in range(s_total):
        xa = x0[s]
        ya = y0[s]
        fx = wx1[s]
        fy = wy1[s]
        du = 0.0
        dv = 0.0
        for dy in range(2):
            yy = ya + dy
            if yy < 0 or yy >= h:
                continue
            wy = fy if dy == 1 else 1.0 - fy
            sy = 1.0 if dy == 1 else -1.0
            for dx in range(2):
                xx = xa + dx
                if xx < 0 or xx >= w:
                    continue
                wx = fx if dx == 1 else 1.0 - fx
                sx = 1.0 if dx == 1 else -1.0
                wgt = wy * wx
                row = yy * w + xx
                dot = 0.0
                for ch in range(c):
                    g = gflat[s, ch]
                    dflat[row, ch] += wgt * g
                    dot += g * flat[row, ch]
                du += sx * wy * dot
                dv += sy * wx * dot
        dcoords[s, 0] = du
        dcoords[s, 1] = dv


@njit(cache=True)
def im2col_pad(x, kh, kw, sh, sw, ph, pw, cols):
    """x: (C, H, W); cols: (C*kh*kw, Ho*Wo), zero padding applied on the fly."""
    c, h, w = x.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    for ci in range(c):
        for a in range(kh):
            for b in range(kw):
                krow = (ci * kh + a) * kw + b
                for oy in range(ho):
                    yy = oy * sh + a - ph
                    base = oy * wo
                    if yy < 0 or yy >= h:
                        for ox in range(wo):
                            cols[krow, base + ox] = 0.0
                        continue
                    for ox in range(wo):
                        xx = ox * sw + b - pw
                        if xx < 0 or xx >= w:
                            cols[krow, base + ox] = 0.0
                        else:
                            cols[krow, base + ox] = x[ci, yy, xx]


@njit(cache=True)
def col2im_pad(dcols, kh, kw, sh, sw, ph, pw, dx):
    """Scatter-add transpose of im2col_pad. dcols: (C*kh*kw, Ho*Wo); dx: (C, H, W)."""
    c, h, w = dx.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    for ci in range(c):
        for a in range(kh):
            for b in range(kw):
                krow = (ci * kh + a) * kw + b
                for oy in range(ho):
                    yy = oy * sh + a - ph
                    if yy < 0 or yy >= h:
                        continue
                    base = oy * wo
                    for ox in range(wo):
                        xx = ox * sw + b - pw
                        if 0 <= xx < w:
                            dx[ci, yy, xx] += dcols[krow, base + ox]
