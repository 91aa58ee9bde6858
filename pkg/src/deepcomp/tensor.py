"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Only the operations needed by the compositing networks and losses are
provided. Storage defaults to float32; ``precision(np.float64)`` switches
newly created tensors to float64, which the gradient-check tests use.
"""
from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class UsageError(RuntimeError):
    pass


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An array plus the bookkeeping needed for reverse-mode differentiation.

    ``_parents`` and ``_backward`` are only set on tensors produced by an
    operation while gradient recording is on. ``_backward`` maps the gradient
    of the output to a tuple of gradients, one per parent (``None`` allowed).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op})"

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an operation result, recording it on the tape when needed."""
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def graph(root: Tensor) -> list:
    """Nodes reachable from ``root`` that require grad, in topological order."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, inputs: Sequence[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-enabled leaf.

    Leaves listed in ``inputs`` that the loss does not reach get an explicit
    zero gradient instead of staying ``None``.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any grad-enabled tensor")
    order = graph(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf in inputs:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_op(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    return make_op(xd ** exponent, (x,), lambda g: (g * exponent * xd ** (exponent - 1),), "pow")


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b, a)
    take_a = a.data <= b.data
    return make_op(np.where(take_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(take_a, g, 0), a.shape),
                              _unbroadcast(np.where(take_a, 0, g), b.shape)), "minimum")


def leaky_relu(x: Tensor, negative_slope: float = 0.2) -> Tensor:
    if not 0.0 < negative_slope < 1.0:
        raise ValueError(f"negative_slope must be in (0, 1), got {negative_slope}")
    xd = x.data
    pos = xd >= 0
    slope = xd.dtype.type(negative_slope)
    return make_op(np.where(pos, xd, xd * slope), (x,),
                   lambda g: (np.where(pos, g, g * slope),), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------- reductions / shape

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_op(np.asarray(x.data.sum(dtype=x.dtype)), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return make_op(np.asarray(x.data.mean(dtype=x.dtype)), (x,),
                   lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def mean_axes(x: Tensor, axes: tuple, keepdims: bool = False) -> Tensor:
    shape = x.shape
    n = int(np.prod([shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims, dtype=x.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return make_op(out, (x,), bw, "mean_axes")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    # basic indexing only (ints and slices): selected elements never repeat
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return make_op(np.ascontiguousarray(x.data[index]), (x,), bw, "getitem")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two NCHW tensors along the channel axis."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_channels expects 4-d tensors, got {a.shape} and {b.shape}")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return make_op(np.concatenate([a.data, b.data], axis=1), (a, b),
                   lambda g: (g[:, :ca], g[:, ca:]), "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# ---------------------------------------------------------------- convolution

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Strided view of shape (N, C, Ho, Wo, k, k); no copy."""
    xp = _pad(x, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add (N, C, Ho, Wo, k, k) back to ``shape``."""
    n, c, h, w = shape
    ho, wo = cols.shape[2], cols.shape[3]
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding. x: (N,Cin,H,W), weight: (Cout,Cin,k,k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d: non-square kernel {k}x{k2}")
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} != weight input channels {wcin}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")

    cols = _im2col(x.data, k, stride, padding)
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    wd = weight.data
    xshape = x.shape

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.tensordot(g, wd, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            gx = _col2im(dcols, xshape, k, stride, padding)
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of ``conv2d``. x: (N,Cin,H,W), weight: (Cin,Cout,k,k).

    Output spatial size is (H-1)*stride - 2*padding + k.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    wcin, cout, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv_transpose2d: non-square kernel {k}x{k2}")
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d: input channels {cin} != weight input channels {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({cout},)")
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: empty output {ho}x{wo}")

    wd = weight.data
    cols = np.tensordot(x.data, wd, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    out = _col2im(cols, (n, cout, ho, wo), k, stride, padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    xd = x.data

    def bw(g):
        gx = gw = gb = None
        gcols = _im2col(g, k, stride, padding)
        if x.requires_grad:
            gx = np.ascontiguousarray(
                np.tensordot(gcols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = np.tensordot(xd, gcols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, parents, bw, "conv_transpose2d")


# ---------------------------------------------------------------- normalization

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               eps: float = 1e-5, momentum: float = 0.1, training: bool = True) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place with an
    exponential moving average (unbiased variance, as is customary).
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    axes = (0, 2, 3)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    gd = gamma.data
    out = gd[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gd[None, :, None, None]
            if training:
                gx = (inv_std[None, :, None, None] / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes)[None, :, None, None]
                    - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None])
            else:
                gx = gxhat * inv_std[None, :, None, None]
        return (gx, gg, gbeta)

    return make_op(out, (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------- losses

def _check_same(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def mean_abs(a: Tensor, b: Tensor) -> Tensor:
    """Mean of |a - b| over every element."""
    a, b = _as_tensor(a), _as_tensor(b, a)
    _check_same(a, b, "mean_abs")
    d = a.data - b.data
    n = d.size
    s = np.sign(d)
    return make_op(np.asarray(np.abs(d).mean(dtype=d.dtype)), (a, b),
                   lambda g: (g * s / n, -g * s / n), "mean_abs")


def mean_sq(a: Tensor, b: Tensor) -> Tensor:
    """Mean of (a - b)^2 over every element."""
    a, b = _as_tensor(a), _as_tensor(b, a)
    _check_same(a, b, "mean_sq")
    d = a.data - b.data
    n = d.size
    return make_op(np.asarray((d * d).mean(dtype=d.dtype)), (a, b),
                   lambda g: (2 * g * d / n, -2 * g * d / n), "mean_sq")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on raw logits, in the overflow-free form."""
    target = np.broadcast_to(np.asarray(target.data if isinstance(target, Tensor) else target,
                                        dtype=logits.dtype), logits.shape)
    z = logits.data
    loss = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0) - z * target
    n = z.size
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_op(np.asarray(loss.mean(dtype=z.dtype)), (logits,),
                   lambda g: ((g * (sig - target) / n).astype(z.dtype),), "bce_with_logits")


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: OptimizerState) -> None:
    """Bias-corrected adaptive-moment update, in place on ``params``.

    Parameters without a gradient are treated as having a zero gradient.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def dump_tensor(t, path) -> None:
    """Debug helper: shape on the first line, then one row-major value per line."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    with open(path, "w") as fh:
        fh.write(" ".join(str(d) for d in data.shape) + "\n")
        for v in data.ravel():
            fh.write(f"{v:.9g}\n")
