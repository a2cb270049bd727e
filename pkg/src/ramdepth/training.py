"""Sequence loss, AdamW with gradient clipping, and the training loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import Tensor, Tape, backward, ops, save_checkpoint
from .geometry import normalize_poses
from .model import ModelConfig
from .pipeline import run_refinement, run_inference


class TrainingError(Exception):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.8
    lr: float = 1e-4
    weight_decay: float = 1e-5
    clip_norm: float = 1.0
    cycles: int = 10
    steps: int = 1000
    seed: int = 0
    fine_tune_lr: float = 1e-5
    fine_tune_start: int = -1   # step index at which lr drops; -1 disables
    checkpoint_every: int = 0   # 0: only final
    val_every: int = 100

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


def sequence_loss(preds: list[Tensor], gt, valid_mask, gamma: float) -> Tensor:
    """Exponentially weighted L1 over the prediction sequence.

    L = sum_s gamma^(S-s) * mean over valid pixels |gt - D^s|.
    """
    gt_arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt, np.float32)
    mask = np.asarray(valid_mask).astype(bool)
    count = int(mask.sum())
    if count == 0:
        raise TrainingError("sequence_loss: empty valid mask")
    shape = preds[0].shape
    gt_t = Tensor(gt_arr.reshape(shape))
    mask_t = Tensor(mask.reshape(shape).astype(np.float32))
    s_total = len(preds)
    total = None
    for s, pred in enumerate(preds, start=1):
        err = ops.absolute(ops.sub(pred, gt_t))
        term = ops.scalar_mul(ops.sum_all(ops.mul(err, mask_t)),
                              (gamma ** (s_total - s)) / count)
        total = term if total is None else ops.add(total, term)
    return total


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    sq = 0.0
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name!r}")
        sq += float(np.square(g, dtype=np.float64).sum())
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * np.float32(factor) for k, g in grads.items()}
    return grads, norm


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray],
             lr: float, weight_decay: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in params.items():
            g = grads[name]
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + weight_decay * p.data
            p.data = (p.data - lr * update).astype(np.float32)


def optimizer_step(params, grads, opt_state: AdamW, lr: float, weight_decay: float):
    opt_state.step(params, grads, lr, weight_decay)
    return params


def _val_mae(scenes, params, cfg, cycles) -> float:
    maes = []
    for scene in scenes:
        res = run_inference(scene.views[0], scene.views[1:], params, cfg, cycles)
        gt = scene.gt_depths[0]
        pred = res.final_depth.data.reshape(gt.shape)
        maes.append(float(np.abs(pred - gt)[gt > 0].mean()))
    return float(np.mean(maes))


def train(config: TrainConfig, dataset, params: dict[str, Tensor], cfg: ModelConfig,
          out_dir=None, val_scenes=()):
    """Train on a sequence of synthetic scenes (batch size 1).

    dataset: sequence of Scene objects (reference view first). Returns
    (params, loss log rows [(step, loss, mae_val)]).
    """
    rng = np.random.default_rng(config.seed)
    opt = AdamW(params)
    log: list[tuple[int, float, float]] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    last_val = float("nan")
    leaves = list(params.values())

    for step in range(1, config.steps + 1):
        scene = dataset[int(rng.integers(len(dataset)))]
        views, scale = normalize_poses(list(scene.views))
        gt = scene.gt_depths[0] / scale
        mask = scene.gt_depths[0] > 0

        with Tape() as tape:
            preds, _, _ = run_refinement(views[0], views[1:], params, cfg, config.cycles)
            loss = sequence_loss(preds, gt.astype(np.float32), mask, config.gamma)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            if out_dir is not None:
                save_checkpoint(out_dir / "last_good.ckpt", params)
            raise TrainingError(f"non-finite loss at step {step}")
        for p in leaves:
            p.zero_grad()
        backward(loss, tape, leaves=leaves)
        grads = {k: p.grad for k, p in params.items()}
        grads, _ = clip_global_norm(grads, config.clip_norm)
        lr = config.lr
        if 0 <= config.fine_tune_start <= step:
            lr = config.fine_tune_lr
        opt.step(params, grads, lr, config.weight_decay)

        if val_scenes and (step % config.val_every == 0 or step == config.steps):
            last_val = _val_mae(val_scenes, params, cfg, config.cycles)
        log.append((step, loss_val, last_val))

        if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"step_{step:06d}.ckpt", params)

    if out_dir is not None:
        save_checkpoint(out_dir / "final.ckpt", params)
        write_loss_log(out_dir / "loss.csv", log)
    return params, log


def write_loss_log(path, log) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "mae_val"])
        for step, loss, mae in log:
            writer.writerow([step, f"{loss:.6g}", f"{mae:.6g}"])
