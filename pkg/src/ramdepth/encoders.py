"""Matching-feature encoder (shared across views) and reference context encoder.

Residual tower: 7x7 stride-2 stem, then one stride-2 + one stride-1 residual
block per remaining halving, and a 1x1 projection head. Both encoders use
the same layout with disjoint parameters.
"""

from __future__ import annotations

import numpy as np

from .diffcore import Tensor, ops
from .model import ModelConfig

# encoder invocation counters, keyed by tower prefix; tests assert the
# bootstrap-only extraction contract through these
INVOCATIONS = {"fenc": 0, "cenc": 0}


def reset_invocations() -> None:
    INVOCATIONS["fenc"] = 0
    INVOCATIONS["cenc"] = 0


def _cnr(x, params, name, cfg: ModelConfig, stride, padding, with_relu=True):
    y = ops.conv2d(x, params[name + ".w"], params[name + ".b"], stride=stride, padding=padding)
    y = ops.norm2d(y, params[name + ".n.gamma"], params[name + ".n.beta"],
                   mode=cfg.norm_mode, num_groups=cfg.norm_groups)
    return ops.relu(y) if with_relu else y


def _res_block_s2(x, params, prefix, cfg):
    y = _cnr(x, params, prefix + "s2.conv0", cfg, 2, 1)
    y = _cnr(y, params, prefix + "s2.conv1", cfg, 1, 1)
    d = _cnr(x, params, prefix + "s2.downs", cfg, 2, 0)
    return ops.relu(ops.add(y, d))


def _res_block_s1(x, params, prefix, cfg):
    y = _cnr(x, params, prefix + "s1.conv0", cfg, 1, 1)
    y = _cnr(y, params, prefix + "s1.conv1", cfg, 1, 1)
    return ops.relu(ops.add(y, x))


def _encode(image: Tensor, params, cfg: ModelConfig, prefix: str, out_dim: int) -> Tensor:
    c, h, w = image.shape
    f = cfg.downsample_factor
    if h % f or w % f:
        raise ValueError(f"image dims {h}x{w} not divisible by downsample factor {f}")
    INVOCATIONS[prefix] += 1
    x = ops.reshape(image, (1, c, h, w))
    x = _cnr(x, params, f"{prefix}.stem", cfg, 2, 3)
    n_blocks = int(np.log2(f)) - 1
    for k in range(n_blocks):
        x = _res_block_s2(x, params, f"{prefix}.block{k}", cfg)
        x = _res_block_s1(x, params, f"{prefix}.block{k}", cfg)
    x = ops.conv2d(x, params[f"{prefix}.head.w"], params[f"{prefix}.head.b"])
    return ops.reshape(x, (out_dim, h // f, w // f))


def encode_features(image: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Matching features (F, H/f, W/f); weights shared across all views."""
    return _encode(image, params, cfg, "fenc", cfg.feature_dim)


def encode_context(image: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Reference context features (C, H/f, W/f); reference view only."""
    return _encode(image, params, cfg, "cenc", cfg.context_dim)
