"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and, while gradients are enabled, every op records
a closure that maps the output gradient back onto its parents. Calling
``backward()`` on a scalar (or with an explicit output gradient) walks the
tape in reverse topological order and accumulates gradients into the leaf
tensors' ``.grad`` fields.

The op set is closed: convolutions (dense and depthwise), linear maps,
softmax / log-softmax, GELU / SiLU, group and layer normalization, pooling
(via mean), residual add, concat, and elementwise arithmetic. Anything else
must be composed from these. Training runs in float32; gradient checks run
the same code in float64 simply by feeding float64 leaves.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (teacher forward, eval)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def backward(self, gradient: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor into every reachable leaf."""
        if not self.requires_grad:
            raise RuntimeError(
                "backward() called on a tensor with no recorded computation"
            )
        if gradient is None:
            if self.size != 1:
                raise RuntimeError("backward() without a gradient requires a scalar output")
            gradient = np.ones_like(self.data)
        gradient = np.asarray(gradient, dtype=self.data.dtype)
        if gradient.shape != self.data.shape:
            raise ValueError(
                f"output gradient shape {gradient.shape} does not match tensor shape {self.data.shape}"
            )

        # Iterative topological sort; tapes can be deep for long loss chains.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): gradient}
        for node in reversed(topo):
            out_grad = grads.pop(id(node), None)
            if out_grad is None:
                continue
            if node._backward_fn is None:
                # Leaf: accumulate into .grad.
                if node.grad is None:
                    node.grad = out_grad.copy()
                else:
                    node.grad = node.grad + out_grad
                continue
            for parent, pgrad in zip(node._parents, node._backward_fn(out_grad)):
                if pgrad is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pgrad
                else:
                    grads[pid] = pgrad

    # Operator sugar ---------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# Elementwise arithmetic ------------------------------------------------
#
# Python-number operands stay python scalars so float32 tensors are not
# promoted to float64 (numpy treats 0-d arrays as strongly typed).


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def add(a, b) -> Tensor:
    if _is_number(b):
        a = as_tensor(a)
        return _record(a.data + b, (a,), lambda g: (g,))
    if _is_number(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    if _is_number(b):
        a = as_tensor(a)
        return _record(a.data - b, (a,), lambda g: (g,))
    if _is_number(a):
        b = as_tensor(b)
        return _record(a - b.data, (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    if _is_number(b):
        a = as_tensor(a)
        return _record(a.data * b, (a,), lambda g: (g * b,))
    if _is_number(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward_fn(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _record(out, (a, b), backward_fn)


def div(a, b) -> Tensor:
    if _is_number(b):
        return mul(a, 1.0 / b)
    if _is_number(a):
        b = as_tensor(b)
        return _record(a / b.data, (b,), lambda g: (-g * a / (b.data * b.data),))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record(out, (a, b), backward_fn)


def power(a, exponent: float) -> Tensor:
    """Elementwise a**exponent for a constant exponent."""
    a = as_tensor(a)
    out = a.data ** exponent

    def backward_fn(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _record(out, (a,), backward_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward_fn(g):
        return (g * out,)

    return _record(out, (a,), backward_fn)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def backward_fn(g):
        return (g / a.data,)

    return _record(out, (a,), backward_fn)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward_fn(g):
        return (g * 0.5 / out,)

    return _record(out, (a,), backward_fn)


# Shape ops -------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), backward_fn)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (g.transpose(inverse),)

    return _record(out, (a,), backward_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    split_points = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, split_points, axis=axis))

    return _record(out, tuple(ts), backward_fn)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward_fn)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record(out, (a,), backward_fn)


# Linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires tensors with ndim >= 2")
    out = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward_fn)


def linear(x, w, b=None) -> Tensor:
    """x @ w + b with x of shape (..., in_dim), w (in_dim, out_dim), b (out_dim,)."""
    x, w = as_tensor(x), as_tensor(w)
    out = x.data @ w.data
    parents: tuple[Tensor, ...]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents = (x, w, b)
    else:
        parents = (x, w)
    in_dim = x.shape[-1]

    def backward_fn(g):
        gx = g @ w.data.T
        gf = g.reshape(-1, g.shape[-1])
        xf = x.data.reshape(-1, in_dim)
        gw = xf.T @ gf
        if b is not None:
            return gx, gw, gf.sum(axis=0)
        return gx, gw

    return _record(out, parents, backward_fn)


# Convolutions ----------------------------------------------------------


def _conv_windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """All (kh, kw) windows of a padded NCHW array, strided: (B, C, Ho, Wo, kh, kw)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw]


def conv2d(x, w, b=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D convolution: x (B, C, H, W), w (F, C, kh, kw), optional bias (F,)."""
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if C != Cw:
        raise ValueError(f"conv2d channel mismatch: input has {C}, kernel expects {Cw}")
    if padding is None:
        padding = kh // 2
    sh = sw = stride
    ph = pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    windows = _conv_windows(xp, kh, kw, sh, sw)  # (B, C, Ho, Wo, kh, kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wf = w.data.reshape(F, -1).T  # (C*kh*kw, F)
    out = cols @ wf
    parents: tuple[Tensor, ...]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents = (x, w, b)
    else:
        parents = (x, w)
    out = out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    def backward_fn(g):
        gf = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        gw = (cols.T @ gf).T.reshape(F, C, kh, kw)
        gcols = gf @ wf.T  # (B*Ho*Wo, C*kh*kw)
        gcols = gcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += gcols[:, :, i, j]
        gx = gxp[:, :, ph : ph + H, pw : pw + W] if (ph or pw) else gxp
        if b is not None:
            return gx, gw, gf.sum(axis=0)
        return gx, gw

    return _record(out, parents, backward_fn)


def depthwise_conv2d(x, w, b=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Per-channel convolution: x (B, C, H, W), w (C, kh, kw), optional bias (C,)."""
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W = x.shape
    Cw, kh, kw = w.shape
    if C != Cw:
        raise ValueError(f"depthwise_conv2d channel mismatch: input has {C}, kernel expects {Cw}")
    if padding is None:
        padding = kh // 2
    sh = sw = stride
    ph = pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    windows = _conv_windows(xp, kh, kw, sh, sw)  # (B, C, Ho, Wo, kh, kw)
    out = np.einsum("bchwij,cij->bchw", windows, w.data, optimize=True)
    parents: tuple[Tensor, ...]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)
    else:
        parents = (x, w)

    def backward_fn(g):
        gw = np.einsum("bchw,bchwij->cij", g, windows, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += (
                    g * w.data[None, :, i, j, None, None]
                )
        gx = gxp[:, :, ph : ph + H, pw : pw + W] if (ph or pw) else gxp
        if b is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return _record(out, parents, backward_fn)


# Nonlinearities --------------------------------------------------------


def gelu(a) -> Tensor:
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))
    out = a.data * cdf

    def backward_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _record(out, (a,), backward_fn)


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def backward_fn(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return _record(out, (a,), backward_fn)


# Softmax family --------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (a,), backward_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_z

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), backward_fn)


# Normalization ---------------------------------------------------------


def _norm_backward(g, xhat, std, axes):
    """Shared gradient for mean/variance normalization over `axes`."""
    m = g.mean(axis=axes, keepdims=True)
    mx = (g * xhat).mean(axis=axes, keepdims=True)
    return (g - m - xhat * mx) / std


def group_norm(x, gain, bias, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over channel groups of an NCHW tensor."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    B, C, H, W = x.shape
    if C % groups != 0:
        raise ValueError(f"group_norm: {groups} groups do not divide {C} channels")
    xg = x.data.reshape(B, groups, C // groups * H * W)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = ((xg - mu) / std).reshape(B, C, H, W)
    out = xhat * gain.data[None, :, None, None] + bias.data[None, :, None, None]

    def backward_fn(g):
        ggain = (g * xhat).sum(axis=(0, 2, 3))
        gbias = g.sum(axis=(0, 2, 3))
        gx = (g * gain.data[None, :, None, None]).reshape(B, groups, -1)
        gx = _norm_backward(gx, xhat.reshape(B, groups, -1), std, axes=2)
        return gx.reshape(B, C, H, W), ggain, gbias

    return _record(out, (x, gain, bias), backward_fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        reduce_axes = tuple(range(x.ndim - 1))
        ggain = (g * xhat).sum(axis=reduce_axes)
        gbias = g.sum(axis=reduce_axes)
        gx = _norm_backward(g * gain.data, xhat, std, axes=-1)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), backward_fn)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Rows scaled to unit L2 norm along `axis`."""
    x = as_tensor(x)
    sq = (x.data * x.data).sum(axis=axis, keepdims=True)
    norm = np.sqrt(sq + eps)
    out = x.data / norm

    def backward_fn(g):
        dot = (g * x.data).sum(axis=axis, keepdims=True)
        return (g / norm - x.data * dot / (norm * norm * norm),)

    return _record(out, (x,), backward_fn)


def global_avg_pool(x) -> Tensor:
    """NCHW feature map -> (B, C) via spatial mean."""
    return tmean(x, axis=(2, 3))
