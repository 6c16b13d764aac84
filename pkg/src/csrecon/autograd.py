"""Reverse-mode differentiation over the small op set the cascades need.

Tensors are real numpy arrays laid out ``[batch, channel, y, z]``. Complex
k-space lives in the graph in packed form (Re at channel 2k, Im at 2k+1), so
the Fourier ops are real-linear maps whose adjoint is the inverse transform.
"""
import contextlib

import numpy as np

from . import kernels
from .errors import ShapeError
from .transform import channels_to_complex, complex_to_channels, fft2c as _fft2c, ifft2c as _ifft2c

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None, retain_graph=False):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        Leaves that do not influence ``self`` keep ``grad is None``; callers
        treat that as a zero gradient. The graph is released afterwards
        unless ``retain_graph`` is set.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            if not retain_graph:
                node.grad = None
                node._backward = None
                node._parents = ()


def _topological(root):
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# --- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul_const(x, c):
    """Elementwise product with a constant array (broadcast to ``x``)."""
    c = np.asarray(c, dtype=x.dtype)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def relu(x):
    pos = x.data > 0
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * pos,))


def tensor_sum(x):
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mse(pred, target, n=None):
    """``sum((pred - target)**2) / n``; ``n`` defaults to the batch size."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    n = pred.shape[0] if n is None else n
    diff = pred.data - target
    value = np.asarray(np.vdot(diff.ravel(), diff.ravel()) / n, dtype=pred.dtype)
    return _result(value, (pred,), lambda g: (diff * (2.0 * g / n),))


# --- structural --------------------------------------------------------------

def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def upsample2x(x):
    """Nearest-neighbour x2 upsampling of the two spatial axes."""
    b, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, 2, w, 2)).reshape(b, c, 2 * h, 2 * w)

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), backward)


def maxpool2d(x):
    """2x2 max pooling with stride 2."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"max pooling needs even spatial extents, got {x.shape[2:]}")
    out, idx = kernels.maxpool2x2(x.data)
    return _result(out, (x,), lambda g: (kernels.maxpool2x2_backward(np.ascontiguousarray(g), idx),))


def conv2d(x, weight, bias):
    """Zero-padded 'same' cross-correlation; kernels are 1x1 or 3x3.

    ``weight`` is ``[out, in, k, k]``, ``bias`` is ``[out]``.
    """
    b, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv expects {ci} input channels, got {c}")
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"only 1x1 and 3x3 kernels are supported, got {kh}x{kw}")
    if kh == 3:
        cols = kernels.im2col3x3(x.data)
    else:
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, b * h * w)
    w2 = weight.data.reshape(o, -1)
    out = w2 @ cols
    out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, b, h, w).transpose(1, 0, 2, 3))
    need_x = x.requires_grad

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, b * h * w)
        dw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        db = g2.sum(axis=1) if bias.requires_grad else None
        dx = None
        if need_x:
            dcols = w2.T @ g2
            if kh == 3:
                dx = kernels.col2im3x3(dcols, (b, c, h, w))
            else:
                dx = np.ascontiguousarray(dcols.reshape(c, b, h, w).transpose(1, 0, 2, 3))
        return dx, dw, db

    return _result(out, (x, weight, bias), backward)


# --- k-space ops -------------------------------------------------------------

def _packed_fourier(data, forward):
    z = channels_to_complex(data)
    z = _fft2c(z) if forward else _ifft2c(z)
    return complex_to_channels(z).astype(data.dtype, copy=False)


def fft2c(x):
    """Centred orthonormal FFT of packed complex channels."""
    return _result(_packed_fourier(x.data, True), (x,), lambda g: (_packed_fourier(g, False),))


def ifft2c(x):
    return _result(_packed_fourier(x.data, False), (x,), lambda g: (_packed_fourier(g, True),))


def data_consistency(pred, measured, keep):
    """``pred * keep + measured`` where ``keep = 1 - mask`` (noiseless replacement)."""
    keep = np.asarray(keep, dtype=pred.dtype)
    measured = np.asarray(measured, dtype=pred.dtype)
    return _result(pred.data * keep + measured, (pred,), lambda g: (g * keep,))
