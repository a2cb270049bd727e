"""Inference loop: scheduling, refinement, ranking, pruning."""

import numpy as np
import pytest

from ramdepth.diffcore import Tensor
from ramdepth.matcher import CorrelationSample
from ramdepth.model import init_params
from ramdepth import encoders, pipeline
from ramdepth.pipeline import (prune_and_eval, rank_from_correlation,
                               run_inference, schedule)


def _nonzero_params(cfg, seed=5):
    """Default init plus a small random depth head, so outputs move off zero."""
    params = init_params(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    params["upd.delta1.w"] = Tensor(
        rng.normal(0, 0.05, size=params["upd.delta1.w"].shape).astype(np.float32),
        requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# scheduling

def test_schedule_round_robin():
    order = [schedule(s, 4) for s in range(1, 41)]
    assert len(order) == 40
    assert order[:6] == [0, 1, 2, 3, 0, 1]


def test_schedule_single_source():
    assert all(schedule(s, 1) == 0 for s in range(1, 41))


def test_schedule_first_step():
    assert schedule(1, 3) == 0


def test_schedule_errors():
    with pytest.raises(ValueError):
        schedule(1, 0)
    with pytest.raises(ValueError):
        schedule(0, 3)


# ---------------------------------------------------------------------------
# inference

def test_sequence_length_and_resolution(tiny_scene, tiny_cfg, tiny_params):
    views = tiny_scene.views
    res = run_inference(views[0], views[1:], tiny_params, tiny_cfg, cycles=2)
    n = len(views) - 1
    assert len(res.depth_sequence) == 2 * n
    for d in res.depth_sequence:
        assert d.shape == (1, views[0].height, views[0].width)
    assert res.final_depth is res.depth_sequence[-1]
    assert res.source_order == [f"view_{1 + schedule(s, n)}" for s in range(1, 2 * n + 1)]


def test_untrained_model_outputs_zero_depth(tiny_scene, tiny_cfg, tiny_params):
    # the depth head is zero-initialized, so an untrained model never moves
    # the zero-initialized depth state
    views = tiny_scene.views
    res = run_inference(views[0], views[1:], tiny_params, tiny_cfg, cycles=2)
    for d in res.depth_sequence:
        assert np.abs(d.data).max() == 0.0


def test_encoders_called_once_per_view(tiny_scene, tiny_cfg, tiny_params):
    views = tiny_scene.views
    encoders.reset_invocations()
    run_inference(views[0], views[1:], tiny_params, tiny_cfg, cycles=3)
    assert encoders.INVOCATIONS["fenc"] == len(views)
    assert encoders.INVOCATIONS["cenc"] == 1


def test_ranking_orders_by_score():
    fake = {sid: CorrelationSample(Tensor(np.full((2, 2, 2), val, np.float32)), sid, 9)
            for sid, val in (("A", 0.9), ("B", 0.2), ("C", 0.5))}
    report = rank_from_correlation(fake, ["A", "B", "C"])
    assert report.ordering == ["A", "C", "B"]
    assert report.scores["A"] == pytest.approx(0.9)


def test_ranking_tie_break_is_input_order():
    fake = {sid: CorrelationSample(Tensor(np.full((2, 2, 2), 0.5, np.float32)), sid, 9)
            for sid in ("X", "Y", "Z")}
    assert rank_from_correlation(fake, ["X", "Y", "Z"]).ordering == ["X", "Y", "Z"]
    assert rank_from_correlation(fake, ["Z", "X", "Y"]).ordering == ["Z", "X", "Y"]


def test_ranking_center_mode():
    scores = np.zeros((9, 1, 1), np.float32)
    scores[4] = 3.0  # center channel only
    fake = {"A": CorrelationSample(Tensor(scores), "A", 1),
            "B": CorrelationSample(Tensor(np.full((9, 1, 1), 0.5, np.float32)), "B", 1)}
    mean_report = rank_from_correlation(fake, ["A", "B"], mode="mean")
    center_report = rank_from_correlation(fake, ["A", "B"], mode="center")
    assert mean_report.ordering == ["B", "A"]   # 3/9 < 0.5
    assert center_report.ordering == ["A", "B"]  # 3.0 > 0.5


def test_duplicate_sources_tie(tiny_scene, tiny_cfg):
    import dataclasses
    views = tiny_scene.views
    params = _nonzero_params(tiny_cfg)
    dup = dataclasses.replace(views[1], id="view_1_copy")
    res = run_inference(views[0], [views[1], dup], params, tiny_cfg, cycles=2)
    s = res.ranking.scores
    assert s["view_1"] == pytest.approx(s["view_1_copy"], abs=1e-6)
    assert res.ranking.ordering[0] == "view_1"


def test_pipeline_scale_equivariance(tiny_scene, tiny_cfg):
    import dataclasses
    views = tiny_scene.views
    params = _nonzero_params(tiny_cfg)
    base = run_inference(views[0], views[1:], params, tiny_cfg, cycles=2)
    assert np.abs(base.final_depth.data).max() > 0
    for s in (0.1, 10.0):
        scaled_views = [dataclasses.replace(v, pose=v.pose.scaled(s)) for v in views]
        res = run_inference(scaled_views[0], scaled_views[1:], params, tiny_cfg, cycles=2)
        rel = np.abs(res.final_depth.data - s * base.final_depth.data)
        denom = np.maximum(np.abs(s * base.final_depth.data), 1e-3)
        assert (rel / denom).max() < 1e-5


def test_prune_k_equals_n_matches_full(tiny_scene, tiny_cfg):
    views = tiny_scene.views
    params = _nonzero_params(tiny_cfg)
    gt = tiny_scene.gt_depths[0]
    n = len(views) - 1
    m_ranked, kept_r = prune_and_eval(views[0], views[1:], params, tiny_cfg,
                                      k=n, mode="ranked", seed=0, gt_depth=gt, cycles=2)
    m_random, kept_x = prune_and_eval(views[0], views[1:], params, tiny_cfg,
                                      k=n, mode="random", seed=0, gt_depth=gt, cycles=2)
    assert sorted(kept_r) == sorted(kept_x)
    assert m_ranked.mae == pytest.approx(m_random.mae, abs=1e-6)


def test_prune_random_is_seeded(tiny_scene, tiny_cfg):
    views = tiny_scene.views
    params = _nonzero_params(tiny_cfg)
    gt = tiny_scene.gt_depths[0]
    _, kept1 = prune_and_eval(views[0], views[1:], params, tiny_cfg,
                              k=1, mode="random", seed=7, gt_depth=gt, cycles=2)
    _, kept2 = prune_and_eval(views[0], views[1:], params, tiny_cfg,
                              k=1, mode="random", seed=7, gt_depth=gt, cycles=2)
    assert kept1 == kept2


def test_prune_k_out_of_range(tiny_scene, tiny_cfg, tiny_params):
    views = tiny_scene.views
    gt = tiny_scene.gt_depths[0]
    with pytest.raises(ValueError):
        prune_and_eval(views[0], views[1:], tiny_params, tiny_cfg,
                       k=0, mode="ranked", seed=0, gt_depth=gt, cycles=2)
    with pytest.raises(ValueError):
        prune_and_eval(views[0], views[1:], tiny_params, tiny_cfg,
                       k=9, mode="bogus", seed=0, gt_depth=gt, cycles=2)


def test_inference_requires_sources(tiny_scene, tiny_cfg, tiny_params):
    with pytest.raises(Exception):
        run_inference(tiny_scene.views[0], [], tiny_params, tiny_cfg, cycles=2)
