"""Shared helpers for the test suite: finite-difference oracle and tiny run configs."""

import numpy as np

from autoview import tensor as T
from autoview.config import from_dict


def numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def gradcheck(build, arrays, rtol=1e-5, atol=1e-7, h=1e-6):
    """``build(*tensors)`` returns a scalar Tensor; compares backward with finite differences."""
    with T.precision(np.float64):
        leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
        analytic = T.grad(build(*leaves), leaves)
        for leaf, ga in zip(leaves, analytic):
            num = numeric_grad(lambda: build(*leaves).item(), leaf.data, h)
            np.testing.assert_allclose(ga, num, rtol=rtol, atol=atol)


def tiny_config(**overrides):
    """A run small enough for unit tests: mlp encoder, 16px images, a handful of samples."""
    data = {
        "steps": 4,
        "batch_size": 8,
        "log_interval": 1,
        "dataset": {"samples_per_class": 4, "test_samples_per_class": 2, "image_size": 16},
        "encoder": {"arch": "mlp", "mlp_input_size": 8, "mlp_width": 32, "mlp_layers": 2},
        "head": {"hidden": 32, "bottleneck": 16, "out_dim": 32},
    }
    for key, value in overrides.items():
        cur = data
        parts = key.split("__")
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = value
    return from_dict(data)


def tiny_vit_config(**overrides):
    cfg = tiny_config(**overrides)
    cfg.encoder.arch = "tiny-vit"
    cfg.encoder.width = 32
    cfg.encoder.depth = 1
    cfg.encoder.heads = 2
    cfg.encoder.mlp_hidden = 64
    return cfg
