"""A small reverse-mode autodiff engine for batch-first 3-D activations.

Activations are ``(N, C, X, Y, Z)`` arrays: a leading batch axis, then the
feature-channel axis, then the three spatial axes. Every op returns a
:class:`Tensor` that remembers its parents and a closure mapping the output
gradient to parent gradients; :meth:`Tensor.backward` walks the graph in
reverse topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Forward passes inside this block record no graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, name={self.name!r})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) * grad into every leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() on a non-scalar needs an explicit grad")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg


class Parameter(Tensor):
    """Trainable leaf with Adam moment buffers.

    ``decay`` marks tensors that receive the L2 penalty (weights, not biases
    or batch-norm affine terms).
    """

    __slots__ = ("adam_m", "adam_v", "step", "decay")

    def __init__(self, data, name=None, decay=True):
        super().__init__(data, requires_grad=True, name=name)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step = 0
        self.decay = decay

    def astype(self, dtype):
        self.data = self.data.astype(dtype)
        self.adam_m = self.adam_m.astype(dtype)
        self.adam_v = self.adam_v.astype(dtype)
        self.grad = None
        return self


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Cross-correlation with a cubic kernel; ``padding=0`` is the valid form."""
    x = _t(x)
    k = kernel.shape[2]
    if min(x.shape[2:]) + 2 * padding < k:
        raise ValueError(f"input extent {x.shape[2:]} smaller than kernel {k}")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, kernel {kernel.shape[1]}")
    out = kernels.conv3d_forward(x.data, kernel.data, padding)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward(g):
        gx, gw = kernels.conv3d_backward(x.data, kernel.data, g, padding, x.requires_grad)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gw, gb

    parents = (x, kernel) + ((bias,) if bias is not None else (Tensor(np.zeros(1)),))
    return _make(out, parents, backward)


def conv3d_valid(x, kernel, bias=None):
    return conv3d(x, kernel, bias, padding=0)


def leaky_relu(x: Tensor, alpha: float = 0.3) -> Tensor:
    x = _t(x)
    a = x.data.dtype.type(alpha)
    neg = x.data <= 0
    out = x.data.copy()
    np.multiply(out, a, out=out, where=neg)

    def backward(g):
        gx = g.copy()
        np.multiply(gx, a, out=gx, where=neg)
        return (gx,)

    return _make(out, (x,), backward)


@dataclass
class BatchNormState:
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels, name="bn", momentum=0.9, eps=1e-5, dtype=np.float32):
        return cls(Parameter(np.ones(channels, dtype), f"{name}.gamma", decay=False),
                   Parameter(np.zeros(channels, dtype), f"{name}.beta", decay=False),
                   np.zeros(channels, dtype), np.ones(channels, dtype), momentum, eps)


def batch_norm(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalisation; statistics over every non-channel axis."""
    x = _t(x)
    c = x.shape[1]
    if c != state.gamma.shape[0]:
        raise ValueError(f"batch norm expects {state.gamma.shape[0]} channels, got {c}")
    shape = (1, c, 1, 1, 1)
    axes = (0, 2, 3, 4)
    dt = x.data.dtype
    if mode == "train":
        mean = x.data.mean(axis=axes)
        xc = x.data - mean.reshape(shape)
        var = np.einsum("ncxyz,ncxyz->c", xc, xc) / (x.data.size // c)
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var
    elif mode == "infer":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv = (1.0 / np.sqrt(np.asarray(var, np.float64) + state.eps)).astype(dt)
    if mode == "train":
        xhat = xc
        xhat *= inv.reshape(shape)
    else:
        xhat = (x.data - np.asarray(mean, dt).reshape(shape)) * inv.reshape(shape)
    out = xhat * state.gamma.data.reshape(shape)
    out += state.beta.data.reshape(shape)

    def backward(g):
        gg = np.einsum("ncxyz,ncxyz->c", g, xhat)
        gb = g.sum(axis=axes)
        scale = (state.gamma.data * inv).reshape(shape)
        if mode == "infer":
            return g * scale, gg, gb
        count = x.data.size // c
        gx = xhat * (-gg / count).reshape(shape)
        gx += g
        gx -= (gb / count).reshape(shape)
        gx *= scale
        return gx, gg, gb

    return _make(out, (x, state.gamma, state.beta), backward)


def pointwise_dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-voxel affine map across channels (a 1x1x1 convolution)."""
    x = _t(x)
    if weights.shape[1] != x.shape[1]:
        raise ValueError(f"dense layer expects {weights.shape[1]} channels, got {x.shape[1]}")
    out = np.moveaxis(np.tensordot(weights.data, x.data, axes=([1], [1])), 0, 1)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = np.moveaxis(np.tensordot(weights.data, g, axes=([0], [1])), 0, 1)
        gw = np.tensordot(g, x.data, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return np.ascontiguousarray(gx), gw, gb

    parents = (x, weights) + ((bias,) if bias is not None else (Tensor(np.zeros(1)),))
    return _make(out, parents, backward)


def softmax_channels(x: Tensor) -> Tensor:
    x = _t(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (x,), backward)


def upsample_replicate(x: Tensor, factor: int = 3) -> Tensor:
    """Nearest-neighbour upsampling: every voxel becomes a ``factor**3`` block."""
    x = _t(x)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    out = x.data
    for ax in (2, 3, 4):
        out = np.repeat(out, factor, axis=ax)

    def backward(g):
        n, c, X, Y, Z = x.shape
        return (g.reshape(n, c, X, factor, Y, factor, Z, factor).sum(axis=(3, 5, 7)),)

    return _make(out, (x,), backward)


def avg_pool(x: Tensor, factor: int = 2) -> Tensor:
    x = _t(x)
    n, c, X, Y, Z = x.shape
    if X % factor or Y % factor or Z % factor:
        raise ValueError(f"extent {x.shape[2:]} not divisible by {factor}")
    f = factor
    out = x.data.reshape(n, c, X // f, f, Y // f, f, Z // f, f).mean(axis=(3, 5, 7))

    def backward(g):
        gx = g / f**3
        for ax in (2, 3, 4):
            gx = np.repeat(gx, f, axis=ax)
        return (gx,)

    return _make(out, (x,), backward)


def conv_transpose2(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution with a 2x2x2 kernel and stride 2 (doubles extents).

    ``kernel`` has shape ``(C_in, C_out, 2, 2, 2)``.
    """
    x = _t(x)
    n, c, X, Y, Z = x.shape
    o = kernel.shape[1]
    if kernel.shape[0] != c:
        raise ValueError(f"transposed conv expects {kernel.shape[0]} channels, got {c}")
    # out[n, o, x, a, y, b, z, d] = sum_c x[n, c, x, y, z] * w[c, o, a, b, d]
    t = np.tensordot(x.data, kernel.data, axes=([1], [0]))  # n X Y Z o a b d
    out = t.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(n, o, 2 * X, 2 * Y, 2 * Z)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gr = g.reshape(n, o, X, 2, Y, 2, Z, 2)
        gx = np.einsum("noxaybzd,coabd->ncxyz", gr, kernel.data, optimize=True)
        gw = np.einsum("noxaybzd,ncxyz->coabd", gr, x.data, optimize=True)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gw, gb

    parents = (x, kernel) + ((bias,) if bias is not None else (Tensor(np.zeros(1)),))
    return _make(out, parents, backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_t(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(out, tensors, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def crop_center(x: Tensor, shape) -> Tensor:
    """Central crop of the spatial axes to ``shape``."""
    x = _t(x)
    lo = [(s - t) // 2 for s, t in zip(x.shape[2:], shape)]
    sl = (slice(None), slice(None)) + tuple(slice(l, l + t) for l, t in zip(lo, shape))
    out = np.ascontiguousarray(x.data[sl])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _make(out, (x,), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)``; handy as a generic probe loss."""
    x = _t(x)
    w = np.asarray(weights, dtype=x.data.dtype)
    val = np.asarray(np.sum(x.data.astype(np.float64) * w), dtype=x.data.dtype)
    return _make(val, (x,), lambda g: (g * w,))


# --------------------------------------------------------------------------
# non-differentiable preprocessing
# --------------------------------------------------------------------------

def gaussian_kernel1d(sigma: float, truncate: float = 3.0, normalize: bool = True) -> np.ndarray:
    radius = int(np.floor(truncate * sigma))
    n = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (n / sigma) ** 2)
    return k / k.sum() if normalize else k


def antialias_blur(vol: np.ndarray, factor: int = 3) -> np.ndarray:
    """Separable Gaussian blur (sigma = factor/2, cut at 3 sigma, edge replicate)."""
    k = gaussian_kernel1d(factor / 2.0)
    out = np.asarray(vol, dtype=np.float64)
    for ax in range(out.ndim - 3, out.ndim):
        out = ndimage.correlate1d(out, k, axis=ax, mode="nearest")
    return out.astype(np.float32)


def downsample_antialias(vol, factor: int = 3):
    """Blur then keep the centre voxel of each ``factor**3`` block.

    Accepts a :class:`~multiprior.volume_io.Volume3D` or a raw array whose
    last three axes are spatial; extents that are not multiples of
    ``factor`` are first extended by edge replication.
    """
    from .volume_io import Volume3D

    arr = vol.data if isinstance(vol, Volume3D) else np.asarray(vol, dtype=np.float32)
    lead = arr.ndim - 3
    extra = [(-s) % factor for s in arr.shape[lead:]]
    if any(extra):
        arr = np.pad(arr, [(0, 0)] * lead + [(0, e) for e in extra], mode="edge")
    blurred = antialias_blur(arr, factor)
    c = factor // 2
    out = blurred[(Ellipsis,) + (slice(c, None, factor),) * 3]
    out = np.ascontiguousarray(out)
    if isinstance(vol, Volume3D):
        return Volume3D(out, tuple(s * factor for s in vol.spacing))
    return out


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

def adam_step(params, lr=5e-5, beta1=0.9, beta2=0.999, eps=1e-7, weight_decay=0.0) -> None:
    """One Adam update with bias correction; clears gradients afterwards.

    The L2 penalty enters as ``weight_decay * value`` added to the gradient of
    parameters flagged ``decay``.
    """
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay and p.decay:
            g = g + weight_decay * p.data
        p.step += 1
        p.adam_m *= beta1
        p.adam_m += (1 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1 - beta2) * g * g
        mhat = p.adam_m / (1 - beta1 ** p.step)
        vhat = p.adam_v / (1 - beta2 ** p.step)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
        p.grad = None
