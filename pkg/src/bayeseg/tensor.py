"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When grad mode is on and any input
requires a gradient, the output records its parents and a backward closure.
``loss.backward()`` orders that graph topologically (the tape) and replays
the closures in reverse, accumulating gradients into the leaf tensors.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

from . import kernels

_grad_enabled = True
_debug = os.environ.get("BAYESEG_DEBUG", "") not in ("", "0")


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op produces NaN or Inf."""


def set_debug(flag: bool) -> None:
    """Toggle finite-value checks at every op boundary."""
    global _debug
    _debug = bool(flag)


def debug_enabled() -> bool:
    return _debug


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- basic accessors ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, op={self._op}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators ---------------------------------------------------------
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

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def backward(self):
        backward(self)


def _scalar_error(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {list(t.shape)}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(data, op):
    if _debug and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _result(data, parents, backward_fn, op) -> Tensor:
    """Wrap ``data`` as an op output, attaching the graph edge when needed."""
    _check(data, op)
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def softplus(a) -> Tensor:
    """``ln(1 + e^x)``, evaluated without overflow."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def bw(g):
        return (g * _sigmoid(a.data),)

    return _result(out, (a,), bw, "softplus")


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- reductions and shape --------------------------------------------------
def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.data, axis=axis), (a,), bw, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors, axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        for ax, (m, n) in enumerate(zip(ref, t.shape)):
            if ax != axis and m != n:
                raise ValueError(f"concat: dimension {ax} mismatch ({m} vs {n})")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# -- convolution -----------------------------------------------------------
def _conv_out(size, k, stride, pad, name):
    num = size + 2 * pad - k
    if num < 0 or num % stride:
        raise ValueError(
            f"conv2d: {name} extent {size} with kernel {k}, stride {stride}, "
            f"padding {pad} does not give an integer output size"
        )
    return num // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x[N,Cin,H,W]`` with ``weight[Cout,Cin,kh,kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and kernel, got {x.ndim}-d and {weight.ndim}-d")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = weight.shape
    if kcin != cin:
        raise ValueError(f"conv2d: input channels {cin} != kernel input channels {kcin}")
    oh = _conv_out(h, kh, stride, padding, "height")
    ow = _conv_out(w, kw, stride, padding, "width")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias shape {list(bias.shape)} != [{cout}] output channels")

    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, oh, ow)

    def bw(g):
        g2 = g.reshape(n, cout, oh * ow)
        gx = gw = gb = None
        if x.requires_grad:
            gx = kernels.col2im(np.matmul(wmat.T, g2), x.shape, kh, kw, stride, padding)
        if weight.requires_grad:
            gw = np.einsum("nop,nkp->ok", g2, cols, optimize=True).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``weight`` has the conv2d layout ``[Cin_x, Cout, kh, kw]`` where ``Cin_x``
    is the channel count of ``x``; the result has ``Cout`` channels and the
    spatial size ``(H - 1) * stride - 2 * padding + k``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(
            f"conv_transpose2d: expected 4-d input and kernel, got {x.ndim}-d and {weight.ndim}-d"
        )
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = weight.shape
    if kcin != cin:
        raise ValueError(f"conv_transpose2d: input channels {cin} != kernel leading dim {kcin}")
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv_transpose2d: non-positive output size {oh}x{ow}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(
                f"conv_transpose2d: bias shape {list(bias.shape)} != [{cout}] output channels"
            )

    wmat = weight.data.reshape(cin, -1)
    x2 = x.data.reshape(n, cin, h * w)
    out_shape = (n, cout, oh, ow)
    out = kernels.col2im(np.matmul(wmat.T, x2), out_shape, kh, kw, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        cols = kernels.im2col(g, kh, kw, stride, padding)
        if x.requires_grad:
            gx = np.matmul(wmat, cols).reshape(x.shape)
        if weight.requires_grad:
            gw = np.einsum("nip,nkp->ik", x2, cols, optimize=True).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "conv_transpose2d")


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` max pooling; ties route to the first max."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"max_pool2d: spatial size {h}x{w} not divisible by {size}")
    oh, ow = h // size, w // size
    blocks = x.data.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, oh, ow, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((n, c, oh, ow, size * size))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _result(out, (x,), bw, "max_pool2d")


# -- probabilities and loss ------------------------------------------------
def softmax_np(z, axis=1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(z, axis=1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits, axis: int = 1) -> Tensor:
    logits = as_tensor(logits)
    if logits.shape[axis] < 1:
        raise ValueError("softmax: need at least one class")
    p = softmax_np(logits.data, axis)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (logits,), bw, "softmax")


def cross_entropy(logits, target) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[target]``.

    ``logits`` is ``[N,C,...]`` and ``target`` an integer array ``[N,...]``.
    """
    logits = as_tensor(logits)
    target = np.asarray(target)
    c = logits.shape[1]
    if target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValueError(
            f"cross_entropy: target shape {list(target.shape)} does not match "
            f"logits {list(logits.shape)} without the class axis"
        )
    if target.size and (target.min() < 0 or target.max() >= c):
        raise ValueError(f"cross_entropy: target class outside [0, {c})")
    target = target.astype(np.int64)
    logp = log_softmax_np(logits.data, axis=1)
    picked = np.take_along_axis(logp, target[:, None], axis=1)
    m = target.size
    loss = -picked.sum() / m

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, target[:, None], np.take_along_axis(grad, target[:, None], axis=1) - 1.0, axis=1)
        return (grad * (g / m),)

    return _result(np.asarray(loss), (logits,), bw, "cross_entropy")


# -- reverse pass ----------------------------------------------------------
def _tape(root: Tensor):
    """Topologically ordered list of graph nodes feeding ``root``."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {list(loss.shape)}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("backward: loss is not finite")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- index algebra ---------------------------------------------------------
def flat_index(shape, index) -> int:
    """Row-major flat offset of a multi-index."""
    flat = 0
    for extent, i in zip(shape, index):
        if not 0 <= i < extent:
            raise IndexError(f"index {i} out of range for extent {extent}")
        flat = flat * extent + i
    return flat


def multi_index(shape, flat: int) -> tuple:
    """Inverse of :func:`flat_index`."""
    out = []
    for extent in reversed(shape):
        out.append(flat % extent)
        flat //= extent
    return tuple(reversed(out))
