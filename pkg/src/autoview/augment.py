"""Photometric augmentation kernels and the discretized operation set.

Images are tensors of shape (3, H, W) or batches (N, 3, H, W) with values in
[0, 1]. Every kernel clamps its output back to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Order matters: it fixes the layout of the sampling logits.
KINDS = (
    "AutoContrast", "Invert", "Equalize", "Solarize", "Posterize", "Contrast",
    "Color", "Brightness", "Sharpness", "Hue", "Grayscale", "GaussianBlur",
)
GEOMETRIC_KINDS = ("ShearX", "TranslateX", "Rotate")
MAGNITUDE_FREE = frozenset({"AutoContrast", "Invert", "Equalize", "Grayscale"})

# Three levels each, weakest first. Other level counts interpolate along these.
DEFAULT_MAGNITUDES = {
    "Solarize": (0.85, 0.6, 0.35),
    "Posterize": (7, 6, 5),
    "Contrast": (0.7, 0.5, 0.3),
    "Color": (0.7, 0.5, 0.3),
    "Brightness": (0.7, 0.5, 0.3),
    "Sharpness": (0.7, 0.5, 0.3),
    "Hue": (0.05, 0.1, 0.2),
    "GaussianBlur": (0.3, 0.6, 1.0),
    "ShearX": (0.1, 0.2, 0.3),
    "TranslateX": (0.1, 0.2, 0.3),
    "Rotate": (10.0, 20.0, 30.0),
}

# Inclusive valid ranges for magnitude values.
_RANGES = {
    "Solarize": (0.0, 1.0),
    "Posterize": (1, 8),
    "Contrast": (0.0, 2.0),
    "Color": (0.0, 2.0),
    "Brightness": (0.0, 2.0),
    "Sharpness": (0.0, 2.0),
    "Hue": (-0.5, 0.5),
    "GaussianBlur": (1e-6, 5.0),
    "ShearX": (-1.0, 1.0),
    "TranslateX": (-0.5, 0.5),
    "Rotate": (-180.0, 180.0),
}

LUMA = np.array([0.299, 0.587, 0.114])
_SMOOTH_3X3 = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=float) / 13.0


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugOp:
    """One entry of the expanded operation set."""

    kind: str
    level: Optional[int] = None
    magnitude: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS and self.kind not in GEOMETRIC_KINDS:
            raise AugmentError(f"unknown augmentation kind {self.kind!r}")
        if self.kind in MAGNITUDE_FREE:
            if self.magnitude is not None:
                raise AugmentError(f"{self.kind} takes no magnitude")
            return
        if self.magnitude is None:
            raise AugmentError(f"{self.kind} needs a magnitude")
        _validate_magnitude(self.kind, self.magnitude)

    @property
    def name(self) -> str:
        if self.level is None:
            return self.kind if self.magnitude is None else f"{self.kind}({self.magnitude:g})"
        return f"{self.kind}[{self.level}]"

    def describe(self) -> str:
        """``kind level magnitude_value`` with ``-`` for absent fields."""
        level = "-" if self.level is None else str(self.level)
        mag = "-" if self.magnitude is None else f"{self.magnitude:g}"
        return f"{self.kind} {level} {mag}"


def _validate_magnitude(kind: str, m: float) -> None:
    if not math.isfinite(m):
        raise AugmentError(f"{kind} magnitude must be finite")
    if kind == "GaussianBlur" and m <= 0:
        raise AugmentError(f"GaussianBlur sigma must be > 0, got {m}")
    if kind == "Posterize" and (m != int(m) or not 1 <= m <= 8):
        raise AugmentError(f"Posterize bits must be an integer in [1, 8], got {m}")
    if kind == "Solarize" and not 0.0 <= m <= 1.0:
        raise AugmentError(f"Solarize threshold must be in [0, 1], got {m}")
    lo, hi = _RANGES[kind]
    if not lo <= m <= hi:
        raise AugmentError(f"{kind} magnitude {m} outside [{lo}, {hi}]")


def _level_values(table: Sequence[float], levels: int, integer: bool) -> list:
    table = [float(v) for v in table]
    pos = [0.5] if levels == 1 else list(np.linspace(0.0, 1.0, levels))
    grid = np.linspace(0.0, 1.0, len(table)) if len(table) > 1 else np.zeros(1)
    vals = [float(np.interp(p, grid, table)) for p in pos]
    if integer:
        vals = [int(math.floor(v + 0.5)) for v in vals]
    else:
        vals = [round(v, 6) for v in vals]
    return vals


def build_operation_set(
    levels: int = 3,
    magnitudes: Optional[Mapping[str, Sequence[float]]] = None,
    kinds: Optional[Iterable[str]] = None,
    include_geometric: bool = False,
    explicit: Optional[Sequence[Mapping]] = None,
) -> list:
    """Expand kinds x magnitude levels into a deterministic list of :class:`AugOp`.

    ``explicit`` bypasses the expansion with a literal list of
    ``{"kind": ..., "magnitude": ...}`` entries (used by toy experiments).
    """
    if explicit is not None:
        ops = [AugOp(e["kind"], e.get("level"), e.get("magnitude")) for e in explicit]
    else:
        if levels < 1:
            raise AugmentError("levels_per_magnitude must be >= 1")
        table = dict(DEFAULT_MAGNITUDES)
        table.update({k: tuple(v) for k, v in (magnitudes or {}).items()})
        chosen = list(KINDS) + (list(GEOMETRIC_KINDS) if include_geometric else [])
        if kinds is not None:
            wanted = list(kinds)
            unknown = [k for k in wanted if k not in chosen]
            if unknown:
                raise AugmentError(f"unknown or disabled kinds: {unknown}")
            chosen = [k for k in chosen if k in wanted]
        ops = []
        for kind in chosen:
            if kind in MAGNITUDE_FREE:
                ops.append(AugOp(kind))
                continue
            for lvl, v in enumerate(_level_values(table[kind], levels, kind == "Posterize")):
                ops.append(AugOp(kind, lvl, v))
    if not ops:
        raise AugmentError("operation set is empty")
    seen = set()
    for op in ops:
        key = (op.kind, op.magnitude)
        if key in seen:
            raise AugmentError(f"duplicate operation {op.describe()!r}")
        seen.add(key)
    return ops


def dump_operation_set(ops: Sequence[AugOp]) -> str:
    return "".join(op.describe() + "\n" for op in ops)


# ---------------------------------------------------------------------------
# kernels (batched: x has shape (N, 3, H, W))

def _gray(x: Tensor) -> Tensor:
    w = LUMA.reshape(1, 3, 1, 1).astype(x.dtype)
    return (x * w).sum(axis=1, keepdims=True)


def _invert(x, m):
    return 1.0 - x


def _solarize(x, t):
    d = x.data
    return T.straight_through(np.where(d < t, d, 1.0 - d), x)


def _posterize(x, bits):
    shift = 8 - int(bits)
    q = np.floor(x.data * 255.0 + 0.5).astype(np.int64)
    q = (q >> shift) << shift
    return T.straight_through(q.astype(x.dtype) / 255.0, x)


def _brightness(x, f):
    return x * f


def _contrast(x, f):
    m = _gray(x).mean(axis=(2, 3), keepdims=True)
    return T.lerp(m, x, f)


def _color(x, f):
    return T.lerp(_gray(x), x, f)


def _sharpness(x, f):
    return T.lerp(T.conv2d_depthwise(x, _SMOOTH_3X3), x, f)


def _grayscale(x, m):
    return T.concat([_gray(x)] * 3, axis=1)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _gaussian_blur(x, sigma):
    s = sigma * x.shape[-1] / 32.0
    k = gaussian_kernel1d(s)
    limit = min(x.shape[-2:]) - 1
    if len(k) // 2 > limit:
        k = k[len(k) // 2 - limit: len(k) // 2 + limit + 1]
        k = k / k.sum()
    y = T.conv2d_depthwise(x, k.reshape(-1, 1))
    return T.conv2d_depthwise(y, k.reshape(1, -1))


def _hue(x, delta):
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    maxc = T.maximum(T.maximum(r, g), b)
    minc = T.minimum(T.minimum(r, g), b)
    span = maxc - minc
    flat = span.data == 0
    safe = span + flat.astype(x.dtype)
    is_r = maxc.data == r.data
    is_g = (maxc.data == g.data) & ~is_r
    h = T.where(is_r, (g - b) / safe, T.where(is_g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = T.where(flat, T.Tensor(np.zeros(h.shape, dtype=x.dtype)), h)
    h6 = T.mod(h + 6.0 * delta, 6.0)
    chans = []
    for n in (5.0, 3.0, 1.0):
        k = T.mod(h6 + n, 6.0)
        w = T.clamp(T.minimum(k, 4.0 - k), 0.0, 1.0)
        chans.append(maxc - span * w)
    return T.concat(chans, axis=1)


def _autocontrast(x, m):
    d = x.data
    lo = d.min(axis=(2, 3), keepdims=True)
    hi = d.max(axis=(2, 3), keepdims=True)
    rng = hi - lo
    live = rng > 0
    out = np.where(live, (d - lo) / np.where(live, rng, 1.0), d)
    return T.straight_through(out.astype(x.dtype), x)


def equalize_array(d: np.ndarray) -> np.ndarray:
    """Per-channel 256-bin histogram equalization of an (N, C, H, W) array."""
    q = np.clip(np.floor(d * 255.0 + 0.5), 0, 255).astype(np.int64)
    out = np.empty(d.shape, dtype=d.dtype)
    for n in range(d.shape[0]):
        for c in range(d.shape[1]):
            ch = q[n, c]
            hist = np.bincount(ch.ravel(), minlength=256)
            nz = hist[hist > 0]
            step = (nz.sum() - nz[-1]) // 255
            if step == 0:
                out[n, c] = d[n, c]
                continue
            lut = (np.concatenate([[0], np.cumsum(hist)[:-1]]) + step // 2) // step
            lut = np.clip(lut, 0, 255)
            out[n, c] = lut[ch] / 255.0
    return out


def _equalize(x, m):
    return T.straight_through(equalize_array(x.data), x)


def _affine_matrix(kind: str, m: float, H: int, W: int) -> np.ndarray:
    """Bilinear resampling matrix (H*W, H*W) for a geometric transform about the center."""
    ys, xs = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    u, v = xs - cx, ys - cy
    if kind == "ShearX":
        su, sv = u + m * v, v
    elif kind == "TranslateX":
        su, sv = u - m * W, v
    else:
        a = math.radians(m)
        su = math.cos(a) * u + math.sin(a) * v
        sv = -math.sin(a) * u + math.cos(a) * v
    sx, sy = (su + cx).ravel(), (sv + cy).ravel()
    M = np.zeros((H * W, H * W))
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    rows = np.arange(H * W)
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            w = (1 - np.abs(sx - xi)) * (1 - np.abs(sy - yi))
            ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H) & (w > 0)
            np.add.at(M, (rows[ok], yi[ok] * W + xi[ok]), w[ok])
    return M


def _geometric(kind):
    def apply(x, m):
        N, C, H, W = x.shape
        M = _affine_matrix(kind, m, H, W).astype(x.dtype)
        fill = (0.5 * (1.0 - M.sum(axis=1))).astype(x.dtype)
        flat = x.reshape(N, C, H * W) @ T.Tensor(M.T.copy())
        return (flat + fill).reshape(N, C, H, W)
    return apply


_KERNELS = {
    "AutoContrast": _autocontrast,
    "Invert": _invert,
    "Equalize": _equalize,
    "Solarize": _solarize,
    "Posterize": _posterize,
    "Contrast": _contrast,
    "Color": _color,
    "Brightness": _brightness,
    "Sharpness": _sharpness,
    "Hue": _hue,
    "Grayscale": _grayscale,
    "GaussianBlur": _gaussian_blur,
    "ShearX": _geometric("ShearX"),
    "TranslateX": _geometric("TranslateX"),
    "Rotate": _geometric("Rotate"),
}

SMOOTH_KINDS = frozenset({"Invert", "Brightness", "Contrast", "Color", "Sharpness",
                          "GaussianBlur", "Grayscale", "Hue"})


def apply_kernel(op: AugOp, img) -> Tensor:
    """Apply one operation to an image (3, H, W) or a batch (N, 3, H, W)."""
    x = T.as_tensor(img)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 3:
        raise T.ShapeError(f"expected (N, 3, H, W) images, got {x.shape}")
    if op.magnitude is not None:
        _validate_magnitude(op.kind, op.magnitude)
    y = T.clamp(_KERNELS[op.kind](x, op.magnitude), 0.0, 1.0)
    return y.reshape(y.shape[1:]) if single else y
