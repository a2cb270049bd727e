"""Model configuration and parameter initialization.

Parameters live in a flat name -> Tensor dict so the checkpoint format stays
trivial. Channel widths scale with the config so the toy model and a
paper-scale model share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .diffcore import Tensor


@dataclass(frozen=True)
class ModelConfig:
    downsample_factor: int = 8
    base_channels: int = 16      # encoder stem width (paper scale: 64)
    feature_dim: int = 48        # matching feature channels F (paper: 256)
    context_dim: int = 48        # reference context channels (paper: 128)
    hidden_dim: int = 48         # recurrent state channels (paper: 128)
    offset_grid: int = 9         # sampling neighborhood is offset_grid^2
    norm_mode: str = "group"     # "group" or "batch-stat"
    norm_groups: int = 8

    def __post_init__(self):
        f = self.downsample_factor
        if f <= 0 or (f & (f - 1)) != 0:
            raise ValueError("downsample_factor must be a power of two")
        if self.base_channels % 16 != 0:
            raise ValueError("base_channels must be divisible by 16")
        if self.hidden_dim % 4 != 0:
            raise ValueError("hidden_dim must be divisible by 4")
        if min(self.feature_dim, self.context_dim, self.offset_grid) <= 0:
            raise ValueError("dims must be positive")

    @property
    def n_offsets(self) -> int:
        return self.offset_grid ** 2

    @property
    def encoder_stage_channels(self) -> list[int]:
        b = self.base_channels
        return [b, b * 3 // 2, b * 2]

    def to_dict(self) -> dict:
        return asdict(self)


PAPER_SCALE = ModelConfig(base_channels=64, feature_dim=256, context_dim=128, hidden_dim=128)


def _conv_shapes_encoder(cfg: ModelConfig, out_dim: int):
    """(name, (O, I, Kh, Kw), stride, has_norm) for one encoder tower."""
    stages = cfg.encoder_stage_channels
    n_stride2_blocks = int(np.log2(cfg.downsample_factor)) - 1
    layers = [("stem", (stages[0], 3, 7, 7), 2, True)]
    cin = stages[0]
    for k in range(n_stride2_blocks):
        cout = stages[min(k + 1, len(stages) - 1)]
        layers += [
            (f"block{k}s2.conv0", (cout, cin, 3, 3), 2, True),
            (f"block{k}s2.conv1", (cout, cout, 3, 3), 1, True),
            (f"block{k}s2.downs", (cout, cin, 1, 1), 2, True),
            (f"block{k}s1.conv0", (cout, cout, 3, 3), 1, True),
            (f"block{k}s1.conv1", (cout, cout, 3, 3), 1, True),
        ]
        cin = cout
    layers.append(("head", (out_dim, cin, 1, 1), 1, False))
    return layers


def _he_conv(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


def _xavier_conv(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    fan_out = shape[0] * shape[2] * shape[3]
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(np.float32)


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def conv(self, name, shape, init="he", zero=False):
        w = np.zeros(shape, np.float32) if zero else (
            _he_conv(self.rng, shape) if init == "he" else _xavier_conv(self.rng, shape))
        self.params[name + ".w"] = Tensor(w, requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(shape[0], np.float32), requires_grad=True)

    def norm(self, name, channels):
        self.params[name + ".gamma"] = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.params[name + ".beta"] = Tensor(np.zeros(channels, np.float32), requires_grad=True)

    def gru_cell(self, name, in_ch, hidden, kernel):
        kh, kw = kernel
        for gate in ("z", "r", "h"):
            shape = (hidden, in_ch + hidden, kh, kw)
            self.params[f"{name}.w{gate}"] = Tensor(_xavier_conv(self.rng, shape), requires_grad=True)
            self.params[f"{name}.b{gate}"] = Tensor(np.zeros(hidden, np.float32), requires_grad=True)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    b = _Builder(seed)
    # shared matching-feature encoder and the reference context encoder
    for prefix, out_dim in (("fenc", cfg.feature_dim), ("cenc", cfg.context_dim)):
        for name, shape, _stride, has_norm in _conv_shapes_encoder(cfg, out_dim):
            b.conv(f"{prefix}.{name}", shape)
            if has_norm:
                b.norm(f"{prefix}.{name}.n", shape[0])

    h, ctx, z = cfg.hidden_dim, cfg.context_dim, cfg.n_offsets
    # offset prediction head (zero-init final layer: start on the epipolar point)
    b.conv("off.conv0", (2 * h, ctx + h + 1, 3, 3))
    b.norm("off.conv0.n", 2 * h)
    b.conv("off.head", (2 * z, 2 * h, 1, 1), zero=True)

    # recurrent block
    b.conv("upd.corr0", (2 * h, z, 1, 1))
    b.conv("upd.corr1", (3 * h // 2, 2 * h, 3, 3))
    b.conv("upd.dfeats0", (h, 1, 7, 7))
    b.conv("upd.dfeats1", (h // 2, h, 3, 3))
    b.conv("upd.motion", (h - 1, 2 * h, 3, 3))
    gru_in = ctx + h  # concat(context, motion, depth)
    b.gru_cell("upd.gru0", gru_in, h, (1, 5))
    b.gru_cell("upd.gru1", gru_in, h, (5, 1))
    b.conv("upd.delta0", (h // 2, h, 3, 3))
    b.conv("upd.delta1", (1, h // 2, 3, 3), zero=True)

    # convex upsampling mask head (zero-init final layer: uniform mask)
    f2 = cfg.downsample_factor ** 2
    b.conv("up.conv0", (h + ctx, h + ctx, 3, 3))
    b.conv("up.head", (f2 * 9, h + ctx, 1, 1), zero=True)

    return b.params


def param_count(params: dict[str, Tensor]) -> int:
    return sum(int(np.prod(t.shape)) for t in params.values())
