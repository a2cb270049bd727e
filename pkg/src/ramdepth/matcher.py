"""Deformable epipolar correlation sampling.

A small head predicts, per coarse pixel, a neighborhood of sampling offsets
around the epipolar projection of the current depth estimate; source
features are bilinearly sampled there and correlated (raw dot product)
against the reference features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, ops, record_op
from .geometry import project_map
from .model import ModelConfig


@dataclass
class OffsetField:
    offsets: Tensor  # (2*Z, Hc, Wc): Z (du, dv) pairs per pixel, coarse-pixel units
    grid: int        # Z == grid * grid


@dataclass
class CorrelationSample:
    scores: Tensor  # (Z, Hc, Wc)
    source_id: str
    iteration: int


def predict_offsets(context: Tensor, hidden: Tensor, depth: Tensor, params,
                    cfg: ModelConfig) -> OffsetField:
    """Per-pixel sampling offsets conditioned on context, hidden state and depth."""
    if context.shape[1:] != hidden.shape[1:] or context.shape[1:] != depth.shape[1:]:
        raise ValueError("predict_offsets: spatially misaligned inputs")
    _, hc, wc = depth.shape
    x = ops.concat([context, hidden, depth], axis=0)
    x = ops.reshape(x, (1, x.shape[0], hc, wc))
    y = ops.conv2d(x, params["off.conv0.w"], params["off.conv0.b"], padding=1)
    y = ops.norm2d(y, params["off.conv0.n.gamma"], params["off.conv0.n.beta"],
                   mode=cfg.norm_mode, num_groups=cfg.norm_groups)
    y = ops.relu(y)
    y = ops.conv2d(y, params["off.head.w"], params["off.head.b"])
    return OffsetField(ops.reshape(y, (2 * cfg.n_offsets, hc, wc)), cfg.offset_grid)


def sample_correlation(ref_feat: Tensor, src_feat: Tensor, depth: Tensor,
                       cameras, offsets: OffsetField, *, scale: float,
                       source_id: str = "", iteration: int = 0) -> CorrelationSample:
    """Correlation scores at the offset neighborhood of the epipolar point.

    cameras: (ref (Intrinsics, Pose), src (Intrinsics, Pose)) at full
    resolution; scale is the coarse-to-full factor. Behind-camera or
    out-of-bounds samples correlate against zero features.
    """
    f, hc, wc = ref_feat.shape
    z = offsets.grid ** 2
    base, _valid = project_map(depth, cameras[0], cameras[1], scale=scale)
    base = ops.tile_batch(ops.reshape(base, (1, 2, hc, wc)), z)
    coords = ops.add(base, ops.reshape(offsets.offsets, (z, 2, hc, wc)))
    # fold the Z samples into the spatial dim: one sampling pass over src_feat
    coords = ops.reshape(ops.transpose(coords, (1, 0, 2, 3)), (1, 2, z * hc, wc))
    src = ops.reshape(src_feat, (1, f, hc, wc))
    sampled = ops.grid_sample_bilinear(src, coords)  # (1, F, Z*Hc, Wc)
    sampled = ops.reshape(sampled, (f, z, hc, wc))
    scores = _correlate(ref_feat, sampled)  # (Z, Hc, Wc)
    return CorrelationSample(scores, source_id, iteration)


def _correlate(ref: Tensor, sampled: Tensor) -> Tensor:
    """scores[z] = sum_f ref[f] * sampled[f, z], fused for speed."""
    rd, sd = ref.data, sampled.data
    out = np.einsum("fyx,fzyx->zyx", rd, sd)

    def bwd(g):
        dref = np.einsum("fzyx,zyx->fyx", sd, g)
        dsampled = rd[:, None] * g[None]
        return dref, dsampled

    return record_op([ref, sampled], out.astype(ref.dtype), bwd)
