"""Encoders, projection head, EMA teacher and the adversarial distillation loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container: named tensors plus named child modules."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name: str, value: np.ndarray, decay: bool = True) -> Tensor:
        t = Tensor(value, requires_grad=True)
        t._op = "param" if decay else "param_nodecay"
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise KeyError(f"parameter structure mismatch: {missing[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise T.ShapeError(f"{name}: expected {p.shape}, got {state[name].shape}")
            p.data = state[name].astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = self.add_param("weight", trunc_normal(rng, (d_in, d_out)))
        self.bias = self.add_param("bias", np.zeros(d_out), decay=False) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(dim), decay=False)
        self.beta = self.add_param("beta", np.zeros(dim), decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng):
        super().__init__()
        if dim % heads:
            raise ValueError("width must be divisible by the number of heads")
        self.heads = heads
        self.qkv = self.add_child("qkv", Linear(dim, 3 * dim, rng))
        self.proj = self.add_child("proj", Linear(dim, dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        B, N, C = x.shape
        hd = C // self.heads
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.softmax((q @ k.transpose(0, 1, 3, 2)) * (hd ** -0.5), axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(B, N, C)
        return self.proj(out)


class Block(Module):
    def __init__(self, dim: int, heads: int, hidden: int, rng):
        super().__init__()
        self.norm1 = self.add_child("norm1", LayerNorm(dim))
        self.attn = self.add_child("attn", Attention(dim, heads, rng))
        self.norm2 = self.add_child("norm2", LayerNorm(dim))
        self.fc1 = self.add_child("fc1", Linear(dim, hidden, rng))
        self.fc2 = self.add_child("fc2", Linear(hidden, dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


def sincos_positions(grid: int, dim: int) -> np.ndarray:
    """2-D sine/cosine position table (grid*grid, dim)."""
    if dim % 4:
        raise ValueError("width must be divisible by 4 for 2-D sin-cos positions")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / quarter)
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    out_y = ys.reshape(-1, 1) * omega
    out_x = xs.reshape(-1, 1) * omega
    return np.concatenate([np.sin(out_x), np.cos(out_x), np.sin(out_y), np.cos(out_y)], axis=1)


class TinyViT(Module):
    def __init__(self, rng, patch_size: int = 4, depth: int = 3, width: int = 64,
                 heads: int = 4, mlp_hidden: int = 256):
        super().__init__()
        self.patch_size = patch_size
        self.width = width
        self.embed_dim = width
        self.patch = self.add_child("patch", Linear(3 * patch_size * patch_size, width, rng))
        self.cls = self.add_param("cls", trunc_normal(rng, (1, 1, width)), decay=False)
        self.blocks = [self.add_child(f"block{i}", Block(width, heads, mlp_hidden, rng)) for i in range(depth)]
        self.norm = self.add_child("norm", LayerNorm(width))
        self._pos_cache: Dict[tuple, np.ndarray] = {}

    def _positions(self, grid: int, dtype) -> np.ndarray:
        key = (grid, np.dtype(dtype).str)
        if key not in self._pos_cache:
            pos = np.concatenate([np.zeros((1, self.width)), sincos_positions(grid, self.width)])
            self._pos_cache[key] = pos[None].astype(dtype)
        return self._pos_cache[key]

    def __call__(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        p = self.patch_size
        if H % p or W % p or H != W:
            raise T.ShapeError(f"image size {H}x{W} not a square multiple of patch {p}")
        g = H // p
        tokens = x.reshape(B, C, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, g * g, C * p * p)
        h = self.patch(tokens)
        cls = self.cls + T.Tensor(np.zeros((B, 1, self.width)), dtype=h.dtype)
        h = T.concat([cls, h], axis=1) + T.Tensor(self._positions(g, h.dtype))
        for blk in self.blocks:
            h = blk(h)
        return self.norm(h)[:, 0]


def pooling_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Area-averaging matrix (n_out, n_in) for adaptive average pooling along one axis."""
    P = np.zeros((n_out, n_in))
    edges = np.linspace(0, n_in, n_out + 1)
    for i in range(n_out):
        a, b = edges[i], edges[i + 1]
        for j in range(int(math.floor(a)), int(math.ceil(b))):
            P[i, j] = min(b, j + 1) - max(a, j)
        P[i] /= b - a
    return P


class MLPEncoder(Module):
    """Adaptive-average-pools the image to ``input_size`` and applies an MLP."""

    def __init__(self, rng, input_size: int = 16, hidden: int = 256, layers: int = 3):
        super().__init__()
        self.input_size = input_size
        self.embed_dim = hidden
        dims = [3 * input_size * input_size] + [hidden] * layers
        self.layers = [self.add_child(f"fc{i}", Linear(dims[i], dims[i + 1], rng)) for i in range(layers)]

    def __call__(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        if H != self.input_size or W != self.input_size:
            Ph = T.Tensor(pooling_matrix(H, self.input_size), dtype=x.dtype)
            Pw = T.Tensor(pooling_matrix(W, self.input_size).T.copy(), dtype=x.dtype)
            x = Ph @ (x @ Pw)
        h = x.reshape(B, -1)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = T.gelu(h)
        return h


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    return x / T.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)


class ProjectionHead(Module):
    def __init__(self, d_in: int, rng, hidden: int = 512, bottleneck: int = 64, out_dim: int = 256):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(d_in, hidden, rng))
        self.fc2 = self.add_child("fc2", Linear(hidden, hidden, rng))
        self.fc3 = self.add_child("fc3", Linear(hidden, bottleneck, rng))
        self.last = self.add_child("last", Linear(bottleneck, out_dim, rng, bias=False))

    def bottleneck(self, x: Tensor) -> Tensor:
        h = T.gelu(self.fc1(x))
        h = T.gelu(self.fc2(h))
        return l2_normalize(self.fc3(h))

    def __call__(self, x: Tensor) -> Tensor:
        return self.last(self.bottleneck(x))


class Network(Module):
    """Backbone followed by the projection head."""

    def __init__(self, backbone: Module, head: ProjectionHead):
        super().__init__()
        self.backbone = self.add_child("backbone", backbone)
        self.head = self.add_child("head", head)

    def __call__(self, x: Tensor) -> Tensor:
        return self.head(self.backbone(x))

    def embed(self, x: Tensor) -> Tensor:
        return self.backbone(x)


def build_network(arch: str, rng: np.random.Generator, *, patch_size=4, depth=3, width=64, heads=4,
                  mlp_hidden=256, mlp_input_size=16, mlp_width=256, mlp_layers=3,
                  head_hidden=512, bottleneck=64, out_dim=256) -> Network:
    if arch == "tiny-vit":
        backbone = TinyViT(rng, patch_size, depth, width, heads, mlp_hidden)
    elif arch == "mlp":
        backbone = MLPEncoder(rng, mlp_input_size, mlp_width, mlp_layers)
    else:
        raise ValueError(f"unknown encoder architecture {arch!r}")
    head = ProjectionHead(backbone.embed_dim, rng, head_hidden, bottleneck, out_dim)
    return Network(backbone, head)


def make_teacher(student: Network, builder) -> Network:
    """Structural copy of ``student`` with identical weights and no gradients."""
    teacher = builder()
    teacher.load_state_dict(student.state_dict())
    return teacher.requires_grad_(False)


# ---------------------------------------------------------------------------
# distillation

@dataclass
class DistillState:
    center: np.ndarray
    center_momentum: float = 0.9
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    ema_momentum: float = 0.996

    def __post_init__(self):
        if not 0 < self.teacher_temp < self.student_temp:
            raise ValueError("need 0 < teacher_temp < student_temp")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must be in [0, 1]")

    @classmethod
    def zeros(cls, dim: int, **kw) -> "DistillState":
        return cls(np.zeros(dim), **kw)


def h_cross_entropy(teacher_logits: Tensor, student_logits: Tensor, state: DistillState) -> Tensor:
    """Batch mean of -sum(a * log b) with a the centered, sharpened teacher distribution.

    The teacher side carries no parameter gradients (teacher weights are
    constants) but stays differentiable w.r.t. its inputs, so augmentation
    parameters upstream of the teacher's view receive gradient.
    """
    if teacher_logits.shape != student_logits.shape or teacher_logits.ndim != 2:
        raise T.ShapeError(f"h_cross_entropy: {teacher_logits.shape} vs {student_logits.shape}")
    center = T.Tensor(state.center.reshape(1, -1), dtype=teacher_logits.dtype)
    a = T.softmax((teacher_logits - center) / state.teacher_temp, axis=-1)
    log_b = T.log_softmax(student_logits / state.student_temp, axis=-1)
    return -(a * log_b).sum(axis=-1).mean()


@dataclass
class LossTerms:
    loss: Tensor
    h_main: float
    h_reg: float
    teacher_logits: np.ndarray


def total_loss(views, student: Network, teacher: Network, state: DistillState, alpha: float = 1.0,
               symmetrize: bool = True) -> LossTerms:
    """Main distillation term minus ``alpha`` times the self-regularizer.

    ``views`` carries v1, v2 (policy outputs) and clean1, clean2 (the same
    crops without policy). A single backward pass of the returned loss gives
    the student its descent direction; policy parameters sit behind
    gradient-reversal nodes inside the views and so move the other way.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    n = views.v1.shape[0]
    t_views = teacher(T.concat([views.v1, views.v2], axis=0))
    t1, t2 = t_views[:n], t_views[n:]
    if symmetrize:
        s_views = student(T.concat([views.v1, views.v2], axis=0))
        s1, s2 = s_views[:n], s_views[n:]
        h_main = (h_cross_entropy(t1, s2, state) + h_cross_entropy(t2, s1, state)) * 0.5
    else:
        h_main = h_cross_entropy(t1, student(views.v2), state)
    if alpha > 0:
        if symmetrize:
            t_clean = teacher(T.concat([views.clean1, views.clean2], axis=0))
            h_reg = (h_cross_entropy(t1, t_clean[:n], state) + h_cross_entropy(t2, t_clean[n:], state)) * 0.5
        else:
            h_reg = h_cross_entropy(t1, teacher(views.clean1), state)
        loss = h_main - h_reg * alpha
        reg_value = h_reg.item()
    else:
        loss = h_main
        reg_value = float("nan")
    return LossTerms(loss, h_main.item(), reg_value, t_views.data)


def regularizer(views, teacher: Network, state: DistillState, symmetrize: bool = True) -> Tensor:
    """The self-regularizer on its own (used to check gradient isolation)."""
    n = views.v1.shape[0]
    t1 = teacher(views.v1)
    reg = h_cross_entropy(t1, teacher(views.clean1), state)
    if symmetrize:
        reg = (reg + h_cross_entropy(teacher(views.v2), teacher(views.clean2), state)) * 0.5
    return reg


def ema_update(teacher: Module, student: Module, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, parameter by parameter."""
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise KeyError("teacher and student parameter structures differ")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise T.ShapeError(f"{name}: {tp.shape} vs {sp.shape}")
        tp.data = (m * tp.data + (1.0 - m) * sp.data).astype(tp.dtype)


def update_center(state: DistillState, teacher_logits: np.ndarray) -> None:
    batch_center = teacher_logits.astype(np.float64).mean(axis=0)
    cm = state.center_momentum
    state.center = cm * state.center + (1.0 - cm) * batch_center
