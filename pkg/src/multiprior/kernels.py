"""Raw 3x3x3 (or any cubic) convolution kernels on batch-first float arrays.

Two interchangeable implementations live here:

* ``numpy`` -- im2col + GEMM, chunked so the column buffer stays bounded.
  This is the reference kernel.
* ``torch`` -- ``torch.nn.functional.conv3d`` and its gradient helpers, used
  only as a faster kernel when torch is importable. Autodiff bookkeeping
  never goes through torch.

Select with :func:`set_backend` or the ``MULTIPRIOR_BACKEND`` environment
variable (``auto`` | ``numpy`` | ``torch``).
"""
from __future__ import annotations

import os

import numpy as np

_COL_BYTES = 96 * 2**20
_backend = os.environ.get("MULTIPRIOR_BACKEND", "auto")
_torch = None
SLAB_BYTES = 256 * 2**20


def _load_torch():
    global _torch
    if _torch is None:
        try:
            import torch
        except ImportError:  # pragma: no cover - depends on the environment
            _torch = False
        else:
            _torch = torch
    return _torch


def set_backend(name: str) -> None:
    global _backend
    if name not in ("auto", "numpy", "torch"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "torch" and not _load_torch():
        raise RuntimeError("torch backend requested but torch is not installed")
    _backend = name


def get_backend() -> str:
    if _backend == "auto":
        return "torch" if _load_torch() else "numpy"
    return _backend


# --------------------------------------------------------------------------
# numpy reference
# --------------------------------------------------------------------------

def _slabs(c, k, out_shape, itemsize):
    """Split the first output axis so each column buffer stays under _COL_BYTES."""
    per_row = c * k**3 * out_shape[1] * out_shape[2] * itemsize
    step = max(1, _COL_BYTES // max(per_row, 1))
    return [(i, min(i + step, out_shape[0])) for i in range(0, out_shape[0], step)]


def _im2col(xs, k, x0, x1, out_shape):
    c = xs.shape[0]
    _, oy, oz = out_shape
    cols = np.empty((c, k, k, k, x1 - x0, oy, oz), dtype=xs.dtype)
    for a in range(k):
        for b in range(k):
            for d in range(k):
                cols[:, a, b, d] = xs[:, x0 + a:x1 + a, b:b + oy, d:d + oz]
    return cols.reshape(c * k**3, -1)


def _conv_np(x, w):
    n, c = x.shape[:2]
    o, k = w.shape[0], w.shape[2]
    out_shape = tuple(s - k + 1 for s in x.shape[2:])
    out = np.empty((n, o) + out_shape, dtype=x.dtype)
    wm = w.reshape(o, -1)
    for i in range(n):
        for x0, x1 in _slabs(c, k, out_shape, x.itemsize):
            cols = _im2col(x[i], k, x0, x1, out_shape)
            out[i, :, x0:x1] = (wm @ cols).reshape((o, x1 - x0) + out_shape[1:])
    return out


def _conv_grad_np(x, w, g):
    n, c = x.shape[:2]
    o, k = w.shape[0], w.shape[2]
    out_shape = g.shape[2:]
    wm = w.reshape(o, -1)
    gw = np.zeros((o, c * k**3), dtype=np.float64)
    gx = np.zeros_like(x)
    for i in range(n):
        for x0, x1 in _slabs(c, k, out_shape, x.itemsize):
            cols = _im2col(x[i], k, x0, x1, out_shape)
            gs = g[i, :, x0:x1].reshape(o, -1)
            gw += gs @ cols.T
            gcols = (wm.T @ gs).reshape((c, k, k, k, x1 - x0) + tuple(out_shape[1:]))
            for a in range(k):
                for b in range(k):
                    for d in range(k):
                        gx[i, :, x0 + a:x1 + a, b:b + out_shape[1], d:d + out_shape[2]] += gcols[:, a, b, d]
    return gx, gw.reshape(w.shape).astype(w.dtype)


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def conv3d_forward(x: np.ndarray, w: np.ndarray, padding: int = 0) -> np.ndarray:
    """Cross-correlate ``x[N, C, X, Y, Z]`` with ``w[O, C, k, k, k]`` (no bias)."""
    if get_backend() == "torch":
        t = _load_torch()
        if x.dtype == np.float32:
            with t.no_grad():
                return t.nn.functional.conv3d(
                    t.from_numpy(np.ascontiguousarray(x)), t.from_numpy(np.ascontiguousarray(w)),
                    padding=padding).numpy()
        # other dtypes go through an im2col buffer in torch; bound it by convolving in slabs
        if padding:
            x = np.pad(x, [(0, 0), (0, 0)] + [(padding, padding)] * 3)
        k = w.shape[-1]
        out = [n - k + 1 for n in x.shape[2:]]
        plane = x.shape[0] * x.shape[1] * k**3 * out[1] * out[2] * x.itemsize
        step = max(1, SLAB_BYTES // max(plane, 1))
        wt = t.from_numpy(np.ascontiguousarray(w))
        parts = []
        with t.no_grad():
            for a in range(0, out[0], step):
                b = min(out[0], a + step)
                xs = t.from_numpy(np.ascontiguousarray(x[:, :, a:b + k - 1]))
                parts.append(t.nn.functional.conv3d(xs, wt).numpy())
        return np.concatenate(parts, axis=2)
    if padding:
        x = np.pad(x, [(0, 0), (0, 0)] + [(padding, padding)] * 3)
    return _conv_np(x, w)


def conv3d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray, padding: int = 0,
                    need_input: bool = True):
    """Return ``(grad_x, grad_w)`` for :func:`conv3d_forward` (``grad_x`` may be None)."""
    if get_backend() == "torch":
        t = _load_torch()
        xt = t.from_numpy(np.ascontiguousarray(x))
        wt = t.from_numpy(np.ascontiguousarray(w))
        gt = t.from_numpy(np.ascontiguousarray(g))
        with t.no_grad():
            gw = t.nn.grad.conv3d_weight(xt, wt.shape, gt, padding=padding)
            if not need_input:
                return None, gw.numpy()
            gx = t.nn.grad.conv3d_input(xt.shape, wt, gt, padding=padding)
        return gx.numpy(), gw.numpy()
    if padding:
        xp = np.pad(x, [(0, 0), (0, 0)] + [(padding, padding)] * 3)
        gx, gw = _conv_grad_np(xp, w, g)
        p = padding
        return np.ascontiguousarray(gx[:, :, p:-p, p:-p, p:-p]), gw
    return _conv_grad_np(x, w, g)
