"""Small reverse-mode autodiff engine on top of numpy.

Every op records its inputs and a backward closure on the output tensor.
``Tensor.backward`` walks the recorded graph once in reverse topological
order and accumulates gradients into leaf tensors that require them.

Besides the usual arithmetic there are three gradient-shaping nodes used by
the augmentation policy:

* :func:`stop_grad` -- identity forward, no gradient upstream.
* :func:`grad_reverse` -- identity forward, gradient multiplied by ``-scale``.
* :func:`straight_through` -- forward takes a given value, backward passes
  the incoming gradient unchanged to a surrogate tensor.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

LOG_EPS = 1e-12

_state = {"dtype": np.float32, "checked": False, "grad": True}


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(FloatingPointError):
    """A non-finite value was produced while checked mode was on."""


class GraphError(RuntimeError):
    """Misuse of the recorded graph (e.g. a second backward)."""


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the element precision of newly created tensors."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Raise :class:`NumericError` whenever an op produces NaN/inf."""
    old = _state["checked"]
    _state["checked"] = enabled
    try:
        yield
    finally:
        _state["checked"] = old


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block, whatever the inputs require."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = _state["dtype"]
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- autodiff -----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        for leaf, g in _run_backward(self):
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _raise_nonscalar():
    raise ShapeError("item() on a non-scalar tensor")


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(root: Tensor):
    if root._consumed:
        raise GraphError("backward already ran on this graph; rebuild it with a new forward pass")
    if not root.requires_grad:
        return []
    order = _topo_order(root)
    grads = {id(root): np.ones_like(root.data)}
    leaves = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        node._consumed = True
        if g is None:
            continue
        if node._backward is None:
            leaves.append((node, g))
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list:
    """Functional gradient: d loss / d input for each input (zeros if disconnected).

    Does not touch ``.grad`` buffers.
    """
    if loss.data.size != 1:
        raise ShapeError(f"grad needs a scalar loss, got shape {loss.shape}")
    found = {id(leaf): g for leaf, g in _run_backward(loss)}
    return [found.get(id(t), np.zeros_like(t.data)) for t in inputs]


def reset_graph(root: Tensor) -> None:
    """Allow another backward over an already traversed graph."""
    stack, seen = [root], set()
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        n._consumed = False
        stack.extend(n._parents)


# ---------------------------------------------------------------------------
# helpers

def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    if _state["checked"] and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} do not conform") from None
    if out != a and out != b:
        raise ShapeError(f"{op}: shapes {a} and {b} would both need expanding")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    """Natural log with the argument clamped to at least 1e-12."""
    a = as_tensor(a)
    safe = np.maximum(a.data, LOG_EPS)
    live = a.data >= LOG_EPS
    return _make(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0).astype(g.dtype),), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _np_sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1 + 0.044715 * x2))
    out = 0.5 * x * (1 + t)

    def backward(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes where lo <= x <= hi."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clamp")


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "maximum")
    pick_a = a.data >= b.data

    def backward(g):
        return (_unbroadcast(g * pick_a, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ~pick_a, b.shape) if b.requires_grad else None)

    return _make(np.maximum(a.data, b.data), (a, b), backward, "maximum")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "minimum")
    pick_a = a.data <= b.data

    def backward(g):
        return (_unbroadcast(g * pick_a, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ~pick_a, b.shape) if b.requires_grad else None)

    return _make(np.minimum(a.data, b.data), (a, b), backward, "minimum")


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data).astype(np.result_type(a.data, b.data))
    _broadcast_shape(a.shape, out.shape, "where")
    _broadcast_shape(b.shape, out.shape, "where")

    def backward(g):
        return (_unbroadcast(g * cond, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ~cond, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward, "where")


def mod(a, m: float) -> Tensor:
    a = as_tensor(a)
    return _make(np.mod(a.data, m), (a,), lambda g: (g,), "mod")


def lerp(a, b, w) -> Tensor:
    """a + w * (b - a)."""
    return add(a, mul(w, sub(b, a)))


# ---------------------------------------------------------------------------
# reductions and shape ops

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "getitem")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward, "stack")


def scatter_rows(parts: Sequence, index_groups: Sequence[np.ndarray], n: int) -> Tensor:
    """Assemble ``n`` rows where ``parts[j]`` supplies rows ``index_groups[j]``."""
    parts = [as_tensor(p) for p in parts]
    tail = parts[0].shape[1:]
    out = np.empty((n,) + tail, dtype=parts[0].dtype)
    for p, idx in zip(parts, index_groups):
        if p.shape[1:] != tail or p.shape[0] != len(idx):
            raise ShapeError("scatter_rows: part shape does not match its index group")
        out[idx] = p.data

    def backward(g):
        return tuple(g[idx] for idx in index_groups)

    return _make(out, tuple(parts), backward, "scatter_rows")


# ---------------------------------------------------------------------------
# linear algebra and fused network ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.ndim > 2 or a.ndim > 2:
        _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.shape)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def _pad_index(n: int, before: int, after: int) -> np.ndarray:
    idx = np.arange(-before, n + after)
    # reflect without repeating the edge, falling back to edge clamp for tiny inputs
    if n > 1:
        period = 2 * (n - 1)
        idx = np.mod(idx, period)
        idx = np.where(idx >= n, period - idx, idx)
    else:
        idx = np.zeros_like(idx)
    return idx


def conv2d_depthwise(x, kernel: np.ndarray) -> Tensor:
    """Same-size correlation of every channel of (N, C, H, W) with one fixed 2-D kernel.

    Borders use reflection padding. The kernel is a constant (no gradient).
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"conv2d_depthwise expects (N, C, H, W), got {x.shape}")
    kernel = np.asarray(kernel, dtype=x.dtype)
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d_depthwise kernel sides must be odd")
    H, W = x.shape[2:]
    rh, rw = kh // 2, kw // 2
    ih, iw = _pad_index(H, rh, rh), _pad_index(W, rw, rw)
    xp = x.data[:, :, ih][:, :, :, iw]
    out = np.zeros_like(x.data)
    for a in range(kh):
        for b in range(kw):
            if kernel[a, b] != 0:
                out += kernel[a, b] * xp[:, :, a:a + H, b:b + W]

    def backward(g):
        gp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                if kernel[a, b] != 0:
                    gp[:, :, a:a + H, b:b + W] += kernel[a, b] * g
        gw = np.zeros(gp.shape[:3] + (W,), dtype=gp.dtype)
        np.add.at(gw, (slice(None), slice(None), slice(None), iw), gp)
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), ih), gw)
        return (gx,)

    return _make(out, (x,), backward, "conv2d_depthwise")


# ---------------------------------------------------------------------------
# gradient-shaping nodes

def stop_grad(a) -> Tensor:
    """Identity forward; contributes nothing to upstream gradients."""
    a = as_tensor(a)
    return Tensor(a.data, dtype=a.data.dtype)


def grad_reverse(a, scale: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-scale``."""
    a = as_tensor(a)
    if not math.isfinite(scale):
        raise ValueError("grad_reverse scale must be finite")
    return _make(a.data, (a,), lambda g: (-scale * g,), "grad_reverse")


def straight_through(value, surrogate) -> Tensor:
    """Forward returns ``value`` exactly; backward routes the gradient to ``surrogate``.

    Equivalent to ``stop_grad(value - surrogate) + surrogate`` but without the
    rounding that expression introduces in the forward value.
    """
    surrogate = as_tensor(surrogate)
    value = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=surrogate.dtype)
    if value.shape != surrogate.shape:
        raise ShapeError(f"straight_through: value {value.shape} vs surrogate {surrogate.shape}")
    return _make(value.copy(), (surrogate,), lambda g: (g,), "straight_through")


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
