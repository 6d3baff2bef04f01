"""Pure-numpy convolution and pooling kernels.

Fallback twin of the compiled ``_kernels`` extension; signatures and
results match it to floating-point rounding. All arrays are float64,
C-contiguous, layout (N, C, H, W). Convolutions are stride 1 with "same"
zero padding and odd square kernels.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def _windows(x, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    # (N, C, H, W, k, k)
    return sliding_window_view(xp, (k, k), axis=(2, 3))


def conv2d_forward(x, w, b):
    k = w.shape[2]
    win = _windows(x, k)
    out = np.einsum("nchwij,fcij->nfhw", win, w, optimize=True)
    out += b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_grad_input(dout, w):
    k = w.shape[2]
    win = _windows(dout, k)
    wf = w[:, :, ::-1, ::-1]
    return np.ascontiguousarray(np.einsum("nfhwij,fcij->nchw", win, wf, optimize=True))


def conv2d_grad_weight(x, dout, k):
    """Per-sample weight gradients, shape (N, F, C, k, k)."""
    win = _windows(x, k)
    return np.ascontiguousarray(np.einsum("nchwij,nfhw->nfcij", win, dout, optimize=True))


def maxpool2_forward(x):
    """2x2 max-pool, stride 2; odd trailing rows/cols are dropped.

    Returns the pooled block and the flat in-window argmax (0..3) per output,
    first maximum winning ties.
    """
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    xs = x[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2)
    xs = xs.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = np.argmax(xs, axis=-1).astype(np.int8)
    out = np.take_along_axis(xs, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2_backward(dout, idx, h, w):
    n, c, ho, wo = dout.shape
    dx = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(dx, idx[..., None].astype(np.intp), dout[..., None], axis=-1)
    dx = dx.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    if 2 * ho == h and 2 * wo == w:
        return np.ascontiguousarray(dx)
    full = np.zeros((n, c, h, w))
    full[:, :, : 2 * ho, : 2 * wo] = dx
    return full
