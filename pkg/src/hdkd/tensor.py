"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op records a :class:`Node` on its output.  Nodes carry a
monotonically increasing id, so sorting the nodes reachable from a loss by id
reproduces the order in which they were appended; :func:`backward` walks that
order in reverse.
"""
from __future__ import annotations

import contextlib
import itertools
import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_state = threading.local()
_node_ids = itertools.count()
_dtype = _PRECISIONS[os.environ.get("HDKD_PRECISION", "f32")]


def set_precision(name: str) -> None:
    """Switch the global floating point type (``"f32"`` or ``"f64"``)."""
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_dtype() -> type:
    return _dtype


def precision_name() -> str:
    return "f64" if _dtype is np.float64 else "f32"


@contextlib.contextmanager
def precision(name: str):
    prev = precision_name()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(prev)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Nodes reachable from one output, in append order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: "Tensor") -> "Tape":
        seen: dict[int, Node] = {}
        stack = [out._node] if out._node is not None else []
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen[node.id] = node
            stack.extend(t._node for t in node.inputs if t._node is not None and t._node.id not in seen)
        return cls([seen[k] for k in sorted(seen)])


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _dtype)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

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

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(next(_node_ids), op, tuple(inputs), backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ValueError(f"shapes {a} and {b} are not broadcast-compatible") from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), bw, "div")


def elementwise(a, b, kind: str) -> Tensor:
    """Broadcasting binary op; ``kind`` is ``"add"`` or ``"mul"``."""
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# -- reductions ------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axes, keepdims) * (1.0 / n)


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., n, k] @ [..., k, m]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``[out, in]``."""
    y = matmul(x, transpose(weight, (1, 0)))
    return y + bias if bias is not None else y


# -- shape ops -------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"cannot reshape {a.shape} ({a.size} elements) into {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ValueError(f"concat partners disagree off axis {axis}: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), bw, "getitem")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast")


def reshape_concat_slice(x, kind: str, *args, **kwargs) -> Tensor:
    """Dispatch helper over the three structural ops."""
    if kind == "reshape":
        return reshape(x, *args, **kwargs)
    if kind == "concat":
        return concat(x, *args, **kwargs)
    if kind == "slice":
        return getitem(x, *args, **kwargs)
    raise ValueError(f"unknown structural op {kind!r}")


# -- activations -----------------------------------------------------------

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch exponentiates a large positive number
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


_ACTIVATIONS = {"gelu": gelu, "relu": relu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return _make(out, (x,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),), "log_softmax")


# -- normalization ---------------------------------------------------------

BN_MOMENTUM = 0.1
NORM_EPS = 1e-5


def _bn_spec(ndim: int) -> str:
    letters = "abcdefgh"[:ndim]
    return f"{letters},{letters}->b"


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = NORM_EPS) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    In training mode the running buffers are updated in place (unbiased
    variance, exponential moving average with ``momentum``).
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch norm in training mode needs batch extent >= 2")
        n = x.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * n / max(n - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        dgamma = np.einsum(_bn_spec(x.ndim), g, xhat)
        dbeta = g.sum(axis=axes)
        scale = (gamma.data * inv_std).reshape(bshape)
        if training:
            m = x.size // x.shape[1]
            # the two batch reductions of dx are dbeta/m and dgamma/m
            dx = scale * (g - (dbeta / m).reshape(bshape) - xhat * (dgamma / m).reshape(bshape))
        else:
            dx = g * scale
        return dx, dgamma, dbeta

    return _make(out.astype(x.dtype), (x, gamma, beta), bw, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize over the last axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    d = x.shape[-1]

    def bw(g):
        lead = tuple(range(x.ndim - 1))
        dxhat = g * gamma.data
        dx = (inv_std / d) * (d * dxhat - dxhat.sum(-1, keepdims=True)
                              - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make((xhat * gamma.data + beta.data).astype(x.dtype), (x, gamma, beta), bw, "layer_norm")


def normalize(x: Tensor, kind: str, gamma: Tensor, beta: Tensor, running_mean=None, running_var=None,
              training: bool = True, momentum: float = BN_MOMENTUM, eps: float = NORM_EPS) -> Tensor:
    if kind == "batch":
        return batch_norm(x, gamma, beta, running_mean, running_var, training, momentum, eps)
    if kind == "layer":
        return layer_norm(x, gamma, beta, eps)
    raise ValueError(f"unknown normalization kind {kind!r}")


# -- convolution -----------------------------------------------------------

def conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, groups: int) -> np.ndarray:
    """Gather patches into ``[groups, Cg*kh*kw, B*Ho*Wo]``."""
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2:4]
    win = win.reshape(B, groups, C // groups, Ho, Wo, kh, kw)
    return win.transpose(1, 2, 5, 6, 0, 3, 4).reshape(groups, (C // groups) * kh * kw, B * Ho * Wo)


def _col2im(cols: np.ndarray, xp_shape: tuple, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    B, C, Hp, Wp = xp_shape
    cols = cols.reshape(C, kh, kw, B, Ho, Wo)
    out = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation via patch gather + batched matmul.

    ``x`` is ``[B, C_in, H, W]``, ``w`` is ``[C_out, C_in/groups, kh, kw]``.
    """
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    if C % groups or O % groups:
        raise ValueError(f"channels ({C} in, {O} out) not divisible by groups={groups}")
    if Cg != C // groups:
        raise ValueError(f"weight expects {Cg * groups} input channels, got {C}")
    Ho, Wo = conv_out_extent(H, kh, stride, padding), conv_out_extent(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv output extent < 1 for input {H}x{W}, kernel {kh}x{kw}, stride {stride}")
    Og = O // groups

    if kh == kw == 1 and stride == 1 and padding == 0:
        # pointwise: no patch gather needed
        xm = x.data.reshape(B, groups, Cg, H * W)
        wm = w.data.reshape(groups, Og, Cg)
        out = (wm @ xm).reshape(B, O, H, W)

        def bw_core(g):
            gm = g.reshape(B, groups, Og, H * W)
            dx = (np.swapaxes(wm, -1, -2) @ gm).reshape(x.shape) if x.requires_grad else None
            dw = (gm @ np.swapaxes(xm, -1, -2)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
            return dx, dw
    elif groups == C == O:
        # depthwise: one strided multiply-add per kernel tap beats the patch gather
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        taps = [(slice(None), slice(None), slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride))
                for i in range(kh) for j in range(kw)]
        wk = w.data.reshape(C, kh * kw)
        out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
        for k, sl in enumerate(taps):
            out += xp[sl] * wk[:, k].reshape(1, C, 1, 1)

        def bw_core(g):
            dw = np.stack([np.einsum("bchw,bchw->c", g, xp[sl]) for sl in taps], axis=1).reshape(w.shape) \
                if w.requires_grad else None
            dx = None
            if x.requires_grad:
                dxp = np.zeros(xp.shape, dtype=g.dtype)
                for k, sl in enumerate(taps):
                    dxp[sl] += g * wk[:, k].reshape(1, C, 1, 1)
                dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
            return dx, dw
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols = _im2col(xp, kh, kw, stride, groups)
        wm = w.data.reshape(groups, Og, Cg * kh * kw)
        out = (wm @ cols).reshape(groups, Og, B, Ho, Wo).transpose(2, 0, 1, 3, 4).reshape(B, O, Ho, Wo)

        def bw_core(g):
            gm = g.reshape(B, groups, Og, Ho * Wo).transpose(1, 2, 0, 3).reshape(groups, Og, B * Ho * Wo)
            dw = (gm @ np.swapaxes(cols, -1, -2)).reshape(w.shape) if w.requires_grad else None
            dx = None
            if x.requires_grad:
                dcols = np.swapaxes(wm, -1, -2) @ gm
                dxp = _col2im(dcols, xp.shape, kh, kw, stride, Ho, Wo)
                dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
            return dx, dw

    inputs = (x, w) if bias is None else (x, w, bias)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        dx, dw = bw_core(g)
        return (dx, dw) if bias is None else (dx, dw, g.sum(axis=(0, 2, 3)))

    return _make(np.ascontiguousarray(out), inputs, bw, "conv2d")


# -- pooling ---------------------------------------------------------------

def pool(x: Tensor, kind: str, scope: str, kernel: int | None = None, stride: int | None = None) -> Tensor:
    """Average or max pooling.

    ``scope`` selects the reduction: ``"global-spatial"`` collapses H x W per
    channel, ``"global-channel"`` collapses C per pixel, ``"window"`` slides a
    ``kernel`` x ``kernel`` window.  Max routes gradient to the first
    (row-major) maximum.
    """
    if kind not in ("avg", "max"):
        raise ValueError(f"unknown pool kind {kind!r}")
    if scope == "global-spatial":
        B, C, H, W = x.shape
        flat = x.data.reshape(B, C, H * W)
        return _reduce_last(x, flat, kind, (B, C, 1, 1), lambda g: g.reshape(B, C, H, W))
    if scope == "global-channel":
        B, C, H, W = x.shape
        flat = x.data.transpose(0, 2, 3, 1).reshape(B, H, W, C)
        return _reduce_last(x, flat, kind, (B, 1, H, W), lambda g: g.transpose(0, 3, 1, 2))
    if scope == "window":
        return _window_pool(x, kind, kernel, stride or kernel)
    raise ValueError(f"unknown pool scope {scope!r}")


def _reduce_last(x, flat, kind, out_shape, unflat):
    n = flat.shape[-1]
    if kind == "avg":
        out = flat.mean(axis=-1)

        def bw(g):
            return (unflat(np.broadcast_to(g.reshape(flat.shape[:-1] + (1,)) / n, flat.shape)),)
    else:
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def bw(g):
            full = np.zeros_like(flat)
            np.put_along_axis(full, idx[..., None], g.reshape(idx.shape + (1,)), axis=-1)
            return (unflat(full),)

    return _make(out.reshape(out_shape), (x,), bw, f"{kind}pool")


def _window_pool(x, kind, k, s):
    if k is None:
        raise ValueError("window pooling needs a kernel size")
    B, C, H, W = x.shape
    if k > H or k > W:
        raise ValueError(f"window {k} does not fit input {H}x{W}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    Ho, Wo = win.shape[2:4]
    flat = win.reshape(B, C, Ho, Wo, k * k)

    def scatter(gwin):
        out = np.zeros_like(x.data)
        gwin = gwin.reshape(B, C, Ho, Wo, k, k)
        for i in range(k):
            for j in range(k):
                out[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gwin[..., i, j]
        return out

    if kind == "avg":
        out = flat.mean(axis=-1)

        def bw(g):
            return (scatter(np.broadcast_to(g[..., None] / (k * k), flat.shape)),)
    else:
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def bw(g):
            gw = np.zeros(flat.shape, dtype=g.dtype)
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            return (scatter(gw),)

    return _make(np.ascontiguousarray(out), (x,), bw, f"{kind}pool")


# -- backward --------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {loss._node.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
            else:
                key = inp._node.id
                grads[key] = gi if key not in grads else grads[key] + gi


NOISE_MARGIN = 1e3


def fd_noise_floor(value: float, epsilon: float, dtype=np.float64) -> float:
    """Magnitude below which a central difference is rounding noise: margin * u * |f| / epsilon."""
    return NOISE_MARGIN * float(np.finfo(dtype).eps) * max(1.0, abs(value)) / epsilon


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], epsilon: float = 1e-6,
               max_coords: int | None = None, seed: int = 0, atol: float | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``f(*xs)`` must return a scalar.  With ``max_coords`` set, a seeded random
    subset of coordinates per input is checked.  The error is
    ``|a - n| / max(|a|, |n|, atol)``; ``atol`` defaults to
    :func:`fd_noise_floor` of the loss so gradients at rounding-noise level
    are compared absolutely rather than relatively.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.grad = None
    loss = f(*xs)
    if atol is None:
        atol = max(1e-8, fd_noise_floor(float(loss.data), epsilon, loss.dtype))
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in xs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + epsilon
                fp = float(f(*xs).data)
                flat[c] = orig - epsilon
                fm = float(f(*xs).data)
            flat[c] = orig
            num = (fp - fm) / (2 * epsilon)
            ana = float(analytic.reshape(-1)[c])
            err = abs(ana - num) / max(abs(ana), abs(num), atol)
            worst = max(worst, err)
    return worst


# -- serialization ---------------------------------------------------------

MAGIC = b"HDKDT"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def dumps_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<HB", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<B", _DTYPE_CODES[dt])
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def loads_array(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor record; returns the array and the offset past it."""
    if buf[offset:offset + 5] != MAGIC:
        raise ValueError("bad tensor magic")
    version, rank = struct.unpack_from("<HB", buf, offset + 5)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    pos = offset + 8
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    (code,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    dt = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape).copy()
    return arr, pos + count * dt.itemsize


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_array(t.data if isinstance(t, Tensor) else t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        arr, _ = loads_array(fh.read())
    return Tensor(arr, dtype=arr.dtype)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
