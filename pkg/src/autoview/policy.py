"""Learnable augmentation policy: hierarchical sampling with straight-through selection.

A policy holds one vector of sampling logits shared by every layer and every
view, plus one execution-probability logit per gated layer. Layer 1 always
executes. Views are generated per sample: every image in a batch draws its
own operations and gates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .augment import AugOp, apply_kernel
from .tensor import Tensor

U_EPS = 1e-6
P_MIN = 1e-4
P_LOGIT_LIMIT = math.log((1 - P_MIN) / P_MIN)


@dataclass
class PolicyParams:
    pi: Tensor
    p_logit: Tensor
    lambda_cat: float = 1.0
    lambda_bern: float = 0.5
    gumbel: bool = False

    @classmethod
    def init(cls, num_ops: int, num_gates: int = 1, p_init: float = 0.5,
             lambda_cat: float = 1.0, lambda_bern: float = 0.5, gumbel: bool = False):
        if not 0.0 < p_init < 1.0:
            raise ValueError("p_init must lie in (0, 1)")
        if lambda_cat <= 0 or lambda_bern <= 0:
            raise ValueError("sampler temperatures must be > 0")
        pi = Tensor(np.zeros(num_ops), requires_grad=True)
        logit = math.log(p_init / (1 - p_init))
        p = Tensor(np.full(num_gates, logit), requires_grad=True)
        return cls(pi, p, lambda_cat, lambda_bern, gumbel)

    @property
    def num_ops(self) -> int:
        return self.pi.shape[0]

    def parameters(self) -> List[Tensor]:
        return [self.pi, self.p_logit]

    def probs(self) -> np.ndarray:
        z = self.pi.data.astype(np.float64)
        e = np.exp(z - z.max())
        return e / e.sum()

    def exec_probs(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-np.clip(self.p_logit.data.astype(np.float64),
                                            -P_LOGIT_LIMIT, P_LOGIT_LIMIT)))


@dataclass
class LayerDraw:
    """Random draws for one layer of one view (length-n arrays)."""

    index: np.ndarray
    cat_u: np.ndarray
    gate_u: Optional[np.ndarray] = None
    gumbel: Optional[np.ndarray] = None


@dataclass
class ViewNoise:
    crop: np.ndarray  # (n, 5): top, left, height, width, flip
    layers: List[LayerDraw]
    whole_gate_u: Optional[np.ndarray] = None


@dataclass
class PolicySample:
    """What actually happened while producing one view."""

    noise: ViewNoise
    gates: List[np.ndarray] = field(default_factory=list)  # gate values per layer, layer 0 is all ones
    selection: List[np.ndarray] = field(default_factory=list)  # forward value of the selected c~ entry

    @property
    def indices(self) -> np.ndarray:
        return np.stack([d.index for d in self.noise.layers])


@dataclass
class Views:
    v1: Tensor
    v2: Tensor
    clean1: Tensor
    clean2: Tensor
    samples: tuple


# ---------------------------------------------------------------------------
# samplers

def uniform(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws on (eps, 1 - eps)."""
    return rng.uniform(U_EPS, 1.0 - U_EPS, size=shape)


def categorical_from_u(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(probs) - 1)


def _selection_probs(pi: Tensor, lambda_cat: float, gumbel: Optional[np.ndarray]) -> Tensor:
    z = pi if gumbel is None else pi + Tensor(gumbel, dtype=pi.dtype)
    return T.softmax(z / lambda_cat if lambda_cat != 1.0 else z, axis=-1)


def sample_operation(pi: Tensor, rng: np.random.Generator, lambda_cat: float = 1.0):
    """Draw one operation index and its straight-through selection vector."""
    u = uniform(rng, 1)
    idx, c_tilde = select(pi, LayerDraw(categorical_from_u(_np_softmax(pi.data), u), u), lambda_cat)
    return int(idx[0]), c_tilde.reshape(pi.shape)


def select(pi: Tensor, draw: LayerDraw, lambda_cat: float = 1.0, anchor: Optional[np.ndarray] = None):
    """Straight-through selection matrix (n, |O|): forward one-hot, backward via softmax.

    With ``anchor`` the forward becomes ``onehot + softmax(pi) - anchor``; this
    is the smooth surrogate whose true derivative equals the straight-through
    gradient at ``pi`` where ``softmax(pi) == anchor`` (used by gradient checks).
    """
    n = len(draw.index)
    c = _selection_probs(pi, lambda_cat, draw.gumbel)
    if c.ndim == 1:
        c = T.stack([c] * n, axis=0) if n > 1 else c.reshape(1, -1)
    hard = np.zeros(c.shape, dtype=c.dtype)
    hard[np.arange(n), draw.index] = 1.0
    if anchor is not None:
        return draw.index, T.add(Tensor(hard - anchor, dtype=c.dtype), c)
    return draw.index, T.straight_through(hard, c)


def _np_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def relaxed_bernoulli(p, lam: float, u) -> Tensor:
    """sigmoid((logit(p) + logit(u)) / lam) with p clamped to [1e-4, 1 - 1e-4]."""
    if lam <= 0:
        raise ValueError("relaxed Bernoulli temperature must be > 0")
    p = T.clamp(T.as_tensor(p), P_MIN, 1.0 - P_MIN)
    u = np.asarray(u, dtype=p.dtype)
    logit_p = T.log(p) - T.log(1.0 - p)
    noise = Tensor(np.log(u) - np.log1p(-u), dtype=p.dtype)
    return T.sigmoid((logit_p + noise) / lam)


def gate_prob(p_logit: Tensor) -> Tensor:
    return T.sigmoid(T.clamp(p_logit, -P_LOGIT_LIMIT, P_LOGIT_LIMIT))


# ---------------------------------------------------------------------------
# crop / flip pre-transform

def _resize_matrix(src: float, start: float, n_out: int, n_in: int) -> np.ndarray:
    """Bilinear interpolation weights mapping a window [start, start+src) of n_in pixels to n_out."""
    R = np.zeros((n_out, n_in))
    scale = src / n_out
    centers = start + (np.arange(n_out) + 0.5) * scale - 0.5
    centers = np.clip(centers, 0, n_in - 1)
    lo = np.floor(centers).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = centers - lo
    R[np.arange(n_out), lo] += 1 - w
    R[np.arange(n_out), hi] += w
    return R


def sample_crops(rng: np.random.Generator, n: int, size: int, scale=(0.4, 1.0),
                 ratio=(3 / 4, 4 / 3), flip: bool = True) -> np.ndarray:
    """Random-resized-crop boxes (top, left, h, w, flip) on a size x size source."""
    area = size * size
    out = np.zeros((n, 5))
    for i in range(n):
        s = rng.uniform(*scale)
        r = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        w = min(size, math.sqrt(s * area * r))
        h = min(size, math.sqrt(s * area / r))
        top = rng.uniform(0, size - h)
        left = rng.uniform(0, size - w)
        f = float(rng.random() < 0.5) if flip else 0.0
        out[i] = (top, left, h, w, f)
    return out


def apply_crops(images: np.ndarray, crops: np.ndarray, out_size: int) -> np.ndarray:
    n, c, H, W = images.shape
    out = np.empty((n, c, out_size, out_size), dtype=images.dtype)
    for i, (top, left, h, w, f) in enumerate(crops):
        Ry = _resize_matrix(h, top, out_size, H)
        Rx = _resize_matrix(w, left, out_size, W)
        img = Ry @ images[i] @ Rx.T
        out[i] = img[:, :, ::-1] if f else img
    return out


def center_crops(n: int, size: int, ratio: float = 1.0) -> np.ndarray:
    side = size * ratio
    off = (size - side) / 2.0
    return np.tile([off, off, side, side, 0.0], (n, 1))


# ---------------------------------------------------------------------------
# view generation

def _apply_layer(y: Tensor, ops: Sequence[AugOp], index: np.ndarray) -> Tensor:
    parts, groups = [], []
    for i in np.unique(index):
        rows = np.flatnonzero(index == i)
        sub = y if len(rows) == len(index) else T.getitem(y, rows)
        parts.append(apply_kernel(ops[int(i)], sub))
        groups.append(rows)
    if len(parts) == 1:
        return parts[0]
    return T.scatter_rows(parts, groups, len(index))


def draw_view_noise(rng: np.random.Generator, n: int, src_size: int, params: PolicyParams,
                    num_layers: int, hierarchical: bool = True, crop_scale=(0.4, 1.0),
                    flip: bool = True) -> ViewNoise:
    crop = sample_crops(rng, n, src_size, crop_scale, flip=flip)
    probs = params.probs()
    layers = []
    for k in range(num_layers):
        g = None
        if params.gumbel:
            g = -np.log(-np.log(uniform(rng, (n, params.num_ops))))
            idx = np.argmax(params.pi.data[None, :] + g, axis=1)
            cu = np.zeros(n)
        else:
            cu = uniform(rng, n)
            idx = categorical_from_u(probs, cu)
        gu = uniform(rng, n) if (hierarchical and k > 0) else None
        layers.append(LayerDraw(idx, cu, gu, g))
    whole = None if hierarchical else uniform(rng, n)
    return ViewNoise(crop, layers, whole)


def policy_view(x_pre: Tensor, params: PolicyParams, ops: Sequence[AugOp], noise: ViewNoise,
                hierarchical: bool = True, grl: bool = True, plain: bool = False,
                anchor: Optional[np.ndarray] = None, freeze_gates: bool = False):
    """Run the layered policy on pre-transformed images; returns (view, PolicySample)."""
    n = x_pre.shape[0]
    shape4 = (n, 1, 1, 1)
    sample = PolicySample(noise)

    def shape_grad(t: Tensor) -> Tensor:
        return T.grad_reverse(t) if grl else t

    def gate(p_index: int, u: np.ndarray) -> Tensor:
        if plain or freeze_gates:
            p = gate_prob(T.stop_grad(params.p_logit[p_index]))
        else:
            p = gate_prob(params.p_logit[p_index])
        b = relaxed_bernoulli(p, params.lambda_bern, u)
        return shape_grad(b.reshape(shape4))

    y = x_pre
    for k, draw in enumerate(noise.layers):
        if plain:
            sel = Tensor(np.ones(n), dtype=x_pre.dtype)
        else:
            _, c_tilde = select(params.pi, draw, params.lambda_cat, anchor)
            onehot = np.zeros(c_tilde.shape, dtype=c_tilde.dtype)
            onehot[np.arange(n), draw.index] = 1.0
            sel = (c_tilde * onehot).sum(axis=1)
        sel = shape_grad(sel.reshape(shape4)) if not plain else sel.reshape(shape4)
        sample.selection.append(sel.data.reshape(n).copy())
        out = _apply_layer(y, ops, draw.index) * sel
        if k == 0 or not hierarchical:
            sample.gates.append(np.ones(n))
            y = out
        else:
            b = gate(k - 1, draw.gate_u)
            sample.gates.append(b.data.reshape(n).copy())
            y = b * out + (1.0 - b) * y
    if not hierarchical:
        b = gate(0, noise.whole_gate_u)
        sample.gates.append(b.data.reshape(n).copy())
        y = b * y + (1.0 - b) * x_pre
    return y, sample


def generate_views(x: np.ndarray, params, ops: Sequence[AugOp], rng: np.random.Generator,
                   out_size: int, num_layers: int = 2, hierarchical: bool = True,
                   crop_scale=(0.4, 1.0), flip: bool = True, noise: Optional[Sequence[ViewNoise]] = None,
                   grl: bool = True, plain: bool = False, anchor: Optional[np.ndarray] = None,
                   freeze_gates: bool = False) -> Views:
    """Two independently sampled policy views of a batch ``x`` (N, 3, S, S) in [0, 1].

    ``params`` is one :class:`PolicyParams` shared by both views, or a pair
    (one per view). ``noise`` replays previously recorded draws.
    """
    pair = params if isinstance(params, (tuple, list)) else (params, params)
    n, src = x.shape[0], x.shape[-1]
    dtype = T.get_default_dtype()
    if noise is None:
        streams = rng.spawn(2)
        noise = [draw_view_noise(s, n, src, p, num_layers, hierarchical, crop_scale, flip)
                 for s, p in zip(streams, pair)]
    views, cleans, samples = [], [], []
    for p, nz in zip(pair, noise):
        clean = Tensor(apply_crops(x, nz.crop, out_size), dtype=dtype)
        v, s = policy_view(clean, p, ops, nz, hierarchical, grl, plain, anchor, freeze_gates)
        views.append(v)
        cleans.append(clean)
        samples.append(s)
    return Views(views[0], views[1], cleans[0], cleans[1], tuple(samples))


def eval_mode_views(x: np.ndarray, params: PolicyParams, ops: Sequence[AugOp],
                    rng: np.random.Generator, out_size: int, num_layers: int = 2,
                    crop_scale=(0.4, 1.0), flip: bool = True):
    """One hard-sampled view per image: gates are exact Bernoulli(p) draws, no graph.

    Returns (view array, indices (K, n), applied flags (K, n)).
    """
    n, src = x.shape[0], x.shape[-1]
    crop = sample_crops(rng, n, src, crop_scale, flip=flip)
    y = Tensor(apply_crops(x, crop, out_size))
    probs = params.probs()
    p_exec = params.exec_probs()
    indices, applied = [], []
    for k in range(num_layers):
        idx = categorical_from_u(probs, uniform(rng, n))
        on = np.ones(n, dtype=bool) if k == 0 else rng.random(n) < p_exec[min(k - 1, len(p_exec) - 1)]
        out = _apply_layer(y, ops, idx)
        y = Tensor(np.where(on.reshape(n, 1, 1, 1), out.data, y.data))
        indices.append(idx)
        applied.append(on)
    return y.data, np.stack(indices), np.stack(applied)


def randaug_view(x: np.ndarray, ops: Sequence[AugOp], n_ops: int, level: int,
                 rng: np.random.Generator, out_size: int, crop_scale=(0.4, 1.0),
                 flip: bool = True) -> np.ndarray:
    """RandAugment-style view: ``n_ops`` uniformly drawn kinds, all at magnitude bin ``level``."""
    n, src = x.shape[0], x.shape[-1]
    crop = sample_crops(rng, n, src, crop_scale, flip=flip)
    y = Tensor(apply_crops(x, crop, out_size))
    pool = randaug_pool(ops, level)
    for _ in range(n_ops):
        idx = np.asarray(pool)[rng.integers(0, len(pool), size=n)]
        y = Tensor(_apply_layer(y, ops, idx).data)
    return y.data


def randaug_pool(ops: Sequence[AugOp], level: int) -> list:
    """One operation index per kind: the magnitude-free entry or the one at ``level``."""
    by_kind = {}
    for i, op in enumerate(ops):
        by_kind.setdefault(op.kind, []).append(i)
    pool = []
    for kind, idxs in by_kind.items():
        if len(idxs) == 1 or ops[idxs[0]].level is None:
            pool.append(idxs[0])
        else:
            pool.append(idxs[min(level, len(idxs) - 1)])
    return pool


# ---------------------------------------------------------------------------
# export

EXPORT_VERSION = 1


@dataclass
class ExportedPolicy:
    ops: List[AugOp]
    probs: np.ndarray
    exec_probs: np.ndarray
    lambda_cat: float
    lambda_bern: float

    def to_params(self) -> PolicyParams:
        """Rebuild logits whose softmax / sigmoid reproduce the exported values."""
        pi = Tensor(np.log(np.maximum(self.probs, 1e-300)), dtype=np.float64)
        p = np.clip(self.exec_probs, P_MIN, 1 - P_MIN)
        return PolicyParams(pi, Tensor(np.log(p / (1 - p)), dtype=np.float64), self.lambda_cat, self.lambda_bern)


def export_policy(params: PolicyParams, ops: Sequence[AugOp]) -> str:
    """Versioned text: header, one ``kind level magnitude probability`` line per op."""
    lines = [f"autoview-policy {EXPORT_VERSION}",
             f"lambda_cat {params.lambda_cat!r}",
             f"lambda_bern {params.lambda_bern!r}",
             "exec_prob " + " ".join(repr(float(p)) for p in params.exec_probs()),
             f"ops {len(ops)}"]
    for op, prob in zip(ops, params.probs()):
        level = "-" if op.level is None else str(op.level)
        mag = "-" if op.magnitude is None else repr(float(op.magnitude))
        lines.append(f"{op.kind} {level} {mag} {float(prob)!r}")
    return "\n".join(lines) + "\n"


def parse_policy_export(text: str) -> ExportedPolicy:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("autoview-policy "):
        raise ValueError("not a policy export file")
    version = int(lines[0].split()[1])
    if version != EXPORT_VERSION:
        raise ValueError(f"unsupported policy export version {version}")
    head = {}
    for ln in lines[1:5]:
        key, *vals = ln.split()
        head[key] = vals
    n = int(head["ops"][0])
    ops, probs = [], []
    for ln in lines[5:5 + n]:
        kind, level, mag, prob = ln.split()
        ops.append(AugOp(kind, None if level == "-" else int(level), None if mag == "-" else float(mag)))
        probs.append(float(prob))
    if len(ops) != n:
        raise ValueError(f"expected {n} operation lines, found {len(ops)}")
    return ExportedPolicy(ops, np.asarray(probs), np.asarray([float(v) for v in head["exec_prob"]]),
                          float(head["lambda_cat"][0]), float(head["lambda_bern"][0]))
