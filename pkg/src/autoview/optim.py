"""Adam/AdamW and the learning-rate / weight-decay schedules."""

from __future__ import annotations

import math
from typing import Dict, List, Sequence

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam with optional decoupled weight decay (AdamW) on a subset of params."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 decay_mask: Sequence[bool] = None):
        self.params = list(params)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = eps
        self.decay_mask = list(decay_mask) if decay_mask is not None else [False] * len(self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float, weight_decay: float = 0.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if weight_decay and self.decay_mask[i]:
                p.data = p.data * (1 - lr * weight_decay)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - lr * update).astype(p.data.dtype)

    def state_dict(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.asarray(self.t, dtype=np.int64)}
        for i in range(len(self.params)):
            out[f"{prefix}.m{i}"] = self.m[i]
            out[f"{prefix}.v{i}"] = self.v[i]
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(state[f"{prefix}.t"])
        for i in range(len(self.params)):
            self.m[i] = state[f"{prefix}.m{i}"].copy()
            self.v[i] = state[f"{prefix}.v{i}"].copy()


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def cosine_with_warmup(step: int, total: int, base: float, final: float, warmup: int) -> float:
    if warmup > 0 and step < warmup:
        return base * step / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return final + 0.5 * (base - final) * (1 + math.cos(math.pi * progress))


def cosine(step: int, total: int, start: float, end: float) -> float:
    progress = min(1.0, step / max(1, total))
    return end + 0.5 * (start - end) * (1 + math.cos(math.pi * progress))


def step_decay(step: int, total: int, base: float, milestones: Sequence[float], factor: float) -> float:
    passed = sum(1 for m in milestones if step >= m * total)
    return base * factor ** passed


def decay_mask(params: List[Tensor]) -> List[bool]:
    """Weight decay on matrices only: biases, norms, tokens are excluded."""
    return [p._op == "param" and p.ndim >= 2 for p in params]
