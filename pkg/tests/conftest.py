"""Shared test helpers: finite-difference gradient checking and tiny scenes."""

import numpy as np
import pytest

from ramdepth.diffcore import Tensor, Tape, backward


def numeric_grad(fn, tensors, index, eps=1e-3):
    """Central-difference gradient of the scalar fn w.r.t. tensors[index]."""
    base = tensors[index].data
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn(*tensors).data.reshape(()))
        flat[i] = orig - eps
        lo = float(fn(*tensors).data.reshape(()))
        flat[i] = orig
        grad.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return grad


def gradcheck(fn, arrays, rtol=1e-3, atol=1e-6, eps=1e-3, min_pass=1.0):
    """Compare tape gradients of scalar fn(*tensors) to central differences.

    arrays: numpy inputs, promoted to float64 leaf Tensors. Asserts that at
    least min_pass of the coordinates agree within rtol/atol.
    """
    tensors = [Tensor(np.asarray(a, np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*tensors)
    backward(loss, tape, leaves=tensors)
    for idx, t in enumerate(tensors):
        num = numeric_grad(fn, tensors, idx, eps=eps)
        ana = t.grad
        assert ana is not None, f"input {idx} received no gradient"
        err = np.abs(ana - num)
        ok = err <= atol + rtol * np.maximum(np.abs(ana), np.abs(num))
        frac = float(ok.mean())
        assert frac >= min_pass, (
            f"input {idx}: {frac:.1%} of coords within tolerance "
            f"(worst abs err {err.max():.3g})"
        )


def random_projection_loss(op):
    """Wrap an op so its output is reduced to a scalar by a fixed projection."""
    proj = {}

    def fn(*tensors):
        out = op(*tensors)
        if out.shape not in proj:
            rng = np.random.default_rng(7)
            proj[out.shape] = rng.normal(size=out.shape)
        from ramdepth.diffcore import ops
        return ops.sum_all(ops.mul(out, Tensor(proj[out.shape].astype(out.data.dtype))))

    return fn


@pytest.fixture(scope="session")
def tiny_scene():
    """A small deterministic multi-view scene (3 sources, 32x24)."""
    from ramdepth.synthdata import SceneSpec, generate_scene
    return generate_scene(SceneSpec(seed=11, width=32, height=24, n_views=4), "tiny")


@pytest.fixture(scope="session")
def tiny_cfg():
    from ramdepth.model import ModelConfig
    return ModelConfig(base_channels=16, feature_dim=16, context_dim=16, hidden_dim=16,
                       norm_groups=4)


@pytest.fixture(scope="session")
def tiny_params(tiny_cfg):
    from ramdepth.model import init_params
    return init_params(tiny_cfg, seed=5)
