"""Full inference: round-robin source scheduling, iterative refinement,
per-step convex-upsampled depth maps, and keyframe ranking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Tensor, ops, no_grad
from . import encoders
from .geometry import View, normalize_poses
from .matcher import CorrelationSample, predict_offsets, sample_correlation
from .model import ModelConfig
from .updater import DepthState, convex_upsample, predict_upmask, recurrent_update


@dataclass
class RankingReport:
    scores: dict[str, float]          # source id -> spatially averaged last correlation
    ordering: list[str]               # descending score, input order breaks ties


@dataclass
class InferenceResult:
    depth_sequence: list[Tensor]      # full-resolution (1, H, W), scene units
    ranking: RankingReport | None
    source_order: list[str]           # source id used at each step
    last_correlation: dict[str, CorrelationSample]
    scale: float

    @property
    def final_depth(self) -> Tensor:
        return self.depth_sequence[-1]


def schedule(step: int, n_sources: int) -> int:
    """Round-robin source index for 1-based step."""
    if n_sources < 1:
        raise ValueError("schedule requires at least one source view")
    if step < 1:
        raise ValueError("steps are 1-based")
    return (step - 1) % n_sources


def run_refinement(reference: View, sources: list[View], params, cfg: ModelConfig,
                   cycles: int = 10):
    """Iterative refinement on pose-normalized views.

    Returns (upsampled depth Tensors in normalized units, per-source last
    CorrelationSample, per-step source ids). Differentiable when called
    under a Tape.

    The per-source CorrelationSamples used for ranking are all computed at
    the final refinement state (same depth and offsets for every source),
    so identical source views receive identical scores and score
    differences reflect image content rather than refinement phase.
    """
    if not sources:
        raise ValueError("at least one source view required")
    f = cfg.downsample_factor
    ref_feat = encoders.encode_features(reference.image, params, cfg)
    context = encoders.encode_context(reference.image, params, cfg)
    src_feats = [encoders.encode_features(s.image, params, cfg) for s in sources]

    hc, wc = reference.height // f, reference.width // f
    state = DepthState.initial(cfg.hidden_dim, hc, wc)
    ref_cams = (reference.intrinsics, reference.pose)

    preds: list[Tensor] = []
    last_corr: dict[str, CorrelationSample] = {}
    order: list[str] = []
    for step in range(1, cycles * len(sources) + 1):
        idx = schedule(step, len(sources))
        src = sources[idx]
        offs = predict_offsets(context, state.hidden, state.depth, params, cfg)
        corr = sample_correlation(ref_feat, src_feats[idx], state.depth,
                                  (ref_cams, (src.intrinsics, src.pose)), offs,
                                  scale=f, source_id=src.id, iteration=step)
        state = recurrent_update(corr, context, state, params, cfg)
        mask = predict_upmask(state.hidden, context, params, cfg)
        preds.append(convex_upsample(state.depth, mask, f))
        order.append(src.id)

    with no_grad():
        final_step = cycles * len(sources)
        offs = predict_offsets(context, state.hidden, state.depth, params, cfg)
        for idx, src in enumerate(sources):
            last_corr[src.id] = sample_correlation(
                ref_feat, src_feats[idx], state.depth,
                (ref_cams, (src.intrinsics, src.pose)), offs,
                scale=f, source_id=src.id, iteration=final_step)
    return preds, last_corr, order


def rank_from_correlation(last_corr: dict[str, CorrelationSample], input_order: list[str],
                          mode: str = "mean") -> RankingReport:
    """Score each source by its last correlation map, averaged spatially.

    mode "mean" averages over all offset channels as well; "center" uses only
    the middle channel. Ties keep input order (stable sort).
    """
    scores = {}
    for sid in input_order:
        c = last_corr[sid].scores.data
        scores[sid] = float(c.mean()) if mode == "mean" else float(c[c.shape[0] // 2].mean())
    ordering = sorted(input_order, key=lambda s: -scores[s])
    return RankingReport(scores=scores, ordering=ordering)


def run_inference(reference: View, sources: list[View], params, cfg: ModelConfig,
                  cycles: int = 10, rank_mode: str = "mean") -> InferenceResult:
    """Normalize poses, refine, and rescale outputs back to scene units."""
    views, scale = normalize_poses([reference] + list(sources))
    with no_grad():
        preds, last_corr, order = run_refinement(views[0], views[1:], params, cfg, cycles)
        depths = [ops.scalar_mul(p, scale) for p in preds]
    ranking = rank_from_correlation(last_corr, [s.id for s in sources], rank_mode)
    return InferenceResult(depth_sequence=depths, ranking=ranking, source_order=order,
                           last_correlation=last_corr, scale=scale)


def rank_sources(result: InferenceResult, mode: str = "mean") -> RankingReport:
    return rank_from_correlation(result.last_correlation,
                                 list(result.last_correlation.keys()), mode)


def prune_and_eval(reference: View, sources: list[View], params, cfg: ModelConfig,
                   k: int, mode: str, seed: int, gt_depth: np.ndarray,
                   cycles: int = 10, thresholds=(0.1, 0.5, 1.0, 2.0)):
    """Rerun inference with k sources chosen by ranking or at random.

    Returns (Metrics of the pruned run, list of kept source ids).
    """
    from .synthdata import compute_metrics

    n = len(sources)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range [1, {n}]")
    if mode == "ranked":
        full = run_inference(reference, sources, params, cfg, cycles)
        keep_ids = set(full.ranking.ordering[:k])
        # keep input order so k == n reproduces the full run exactly
        kept = [s for s in sources if s.id in keep_ids]
    elif mode == "random":
        rng = np.random.default_rng(seed)
        idx = rng.choice(n, size=k, replace=False)
        kept = [sources[i] for i in sorted(idx)]
    else:
        raise ValueError(f"unknown prune mode {mode!r}")
    res = run_inference(reference, kept, params, cfg, cycles)
    mask = gt_depth > 0
    metrics = compute_metrics(res.final_depth.data.reshape(gt_depth.shape), gt_depth,
                              mask, thresholds)
    return metrics, [s.id for s in kept]
