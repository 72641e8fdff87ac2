"""Dense-tensor kernels with hand-written backward passes.

All activations are (batch, channels, height, width) arrays. Convolutions
are stride-1 cross-correlations with odd kernel size and zero same-padding,
so spatial dimensions are preserved everywhere. Every backward is the exact
adjoint of its forward; reduction order is fixed for determinism.
"""
from __future__ import annotations

import ctypes
import ctypes.util

import numpy as np

__all__ = [
    "tune_allocator",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
    "upsample2x_forward",
    "upsample2x_backward",
    "concat_forward",
    "concat_backward",
    "relu_forward",
    "relu_backward",
    "sigmoid_forward",
    "sigmoid_backward",
]


def tune_allocator() -> bool:
    """Keep large freed buffers on the heap instead of returning them to the
    OS, so per-batch temporaries do not fault fresh pages every step. Safe
    no-op where glibc mallopt is unavailable. Returns True when applied."""
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        m_trim, m_mmap = -1, -3
        return bool(libc.mallopt(m_mmap, 1 << 30)) and bool(
            libc.mallopt(m_trim, 1 << 30)
        )
    except (OSError, AttributeError):
        return False


# Reusable per-process scratch buffers for the conv kernels. The kernels are
# used strictly sequentially within one process, so keying by (tag, shape,
# dtype) is safe and avoids reallocating multi-megabyte temporaries per call.
_scratch: dict = {}


def _buf(tag: str, shape: tuple, dtype) -> np.ndarray:
    key = (tag, shape, np.dtype(dtype))
    arr = _scratch.get(key)
    if arr is None:
        arr = np.zeros(shape, dtype=dtype)
        _scratch[key] = arr
    return arr


def _fill_cols(cols: np.ndarray, xp: np.ndarray, k: int, h: int, w: int) -> None:
    """Write same-padded k*k patches of one padded sample into cols."""
    c = xp.shape[0]
    view = cols.reshape(c, k, k, h, w)
    for di in range(k):
        for dj in range(k):
            view[:, di, dj] = xp[:, di : di + h, dj : dj + w]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded cross-correlation plus bias. Returns (y, cache)."""
    cout, cin, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    if x.shape[1] != cin:
        raise ValueError(f"input channels {x.shape[1]} != kernel channels {cin}")
    n, _, h, wd = x.shape
    k, p, hw = kh, kh // 2, h * wd
    wf = np.ascontiguousarray(w.reshape(cout, cin * k * k))
    y = np.empty((n, cout, h, wd), dtype=x.dtype)
    if k == 1:
        for i in range(n):
            np.matmul(wf, x[i].reshape(cin, hw), out=y[i].reshape(cout, hw))
    else:
        # pad borders stay zero across calls: only the interior is written
        xp = _buf("pad", (cin, h + 2 * p, wd + 2 * p), x.dtype)
        cols = _buf("cols", (cin * k * k, hw), x.dtype)
        for i in range(n):
            xp[:, p : p + h, p : p + wd] = x[i]
            _fill_cols(cols, xp, k, h, wd)
            np.matmul(wf, cols, out=y[i].reshape(cout, hw))
    y += b[None, :, None, None]
    return y, (x, w)


def conv2d_backward(dy: np.ndarray, cache):
    """Returns (dx, dw, db). Patch matrices are rebuilt from the cached
    input rather than stored, trading a little recompute for memory."""
    x, w = cache
    cout, cin, k, _ = w.shape
    n, _, h, wd = dy.shape
    p, hw = k // 2, h * wd
    wf = np.ascontiguousarray(w.reshape(cout, cin * k * k))
    db = dy.sum(axis=(0, 2, 3))
    dwf = np.zeros((cout, cin * k * k), dtype=np.float64)
    dx = np.empty(x.shape, dtype=dy.dtype)
    if k == 1:
        for i in range(n):
            dyf = dy[i].reshape(cout, hw)
            dwf += dyf @ x[i].reshape(cin, hw).T
            np.matmul(wf.T, dyf, out=dx[i].reshape(cin, hw))
        return dx, dwf.reshape(w.shape).astype(w.dtype), db
    xp = _buf("pad", (cin, h + 2 * p, wd + 2 * p), x.dtype)
    cols = _buf("cols", (cin * k * k, hw), x.dtype)
    dcols = _buf("dcols", (cin * k * k, hw), dy.dtype)
    dxp = _buf("dpad", (cin, h + 2 * p, wd + 2 * p), dy.dtype)
    for i in range(n):
        xp[:, p : p + h, p : p + wd] = x[i]
        _fill_cols(cols, xp, k, h, wd)
        dyf = dy[i].reshape(cout, hw)
        dwf += dyf @ cols.T
        np.matmul(wf.T, dyf, out=dcols)
        dxp[...] = 0.0
        dview = dcols.reshape(cin, k, k, h, wd)
        for di in range(k):
            for dj in range(k):
                dxp[:, di : di + h, dj : dj + wd] += dview[:, di, dj]
        dx[i] = dxp[:, p : p + h, p : p + wd]
    return dx, dwf.reshape(w.shape).astype(w.dtype), db


def maxpool2x2_forward(x: np.ndarray):
    """2x2 stride-2 max pool; ties resolved to the first entry in row-major
    window order. Returns (y, cache)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 requires even spatial dims, got {h}x{w}")
    win = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool2x2_backward(dy: np.ndarray, cache):
    idx, xshape = cache
    n, c, h, w = xshape
    dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    return (
        dwin.reshape(n, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )


def upsample2x_forward(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2x_backward(dy: np.ndarray) -> np.ndarray:
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_forward(parts: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(parts, axis=1)


def concat_backward(dy: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    return np.split(dy, np.cumsum(sizes)[:-1], axis=1)


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), (x > 0)


def relu_backward(dy: np.ndarray, cache) -> np.ndarray:
    return dy * cache


def sigmoid_forward(x: np.ndarray):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(dy: np.ndarray, cache) -> np.ndarray:
    return dy * cache * (1.0 - cache)
