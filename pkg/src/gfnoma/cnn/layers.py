"""Forward and backward passes of the few layer types the detector needs.

Arrays are laid out (batch, channels, height, width), i.e. (batch, 2M,
devices, symbols) at the input.  Every ``*_backward`` takes the upstream
gradient and the cached forward input and returns the input gradient plus
the parameter gradients.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pads(kernel_shape):
    kh, kw = kernel_shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel sizes must be odd for 'same' padding, got {kernel_shape}")
    return kh // 2, kw // 2


def _windows(x, kh, kw):
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B, C, H, W, kh, kw)


def conv2d_forward(x, W, b):
    """Stride-1 cross-correlation with zero 'same' padding."""
    O, C, kh, kw = W.shape
    _pads((kh, kw))
    if x.shape[1] != C:
        raise ValueError(f"conv expects {C} input channels, got {x.shape[1]}")
    win = _windows(x, kh, kw)
    out = np.tensordot(win, W, axes=([1, 4, 5], [1, 2, 3]))  # (B, H, W, O)
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def conv2d_backward(dout, x, W):
    O, C, kh, kw = W.shape
    ph, pw = _pads((kh, kw))
    B, _, H, Wd = x.shape
    win = _windows(x, kh, kw)
    dW = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
    db = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros((B, C, H + 2 * ph, Wd + 2 * pw), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + H, j:j + Wd] += np.einsum("bohw,oc->bchw", dout, W[:, :, i, j],
                                                      optimize=True)
    return dxp[:, :, ph:ph + H, pw:pw + Wd], dW, db


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def mean_pool_forward(x):
    """Average over the last (symbol) axis: (B, C, H, W) -> (B, C, H)."""
    return x.mean(axis=-1)


def mean_pool_backward(dout, x):
    W = x.shape[-1]
    return np.broadcast_to(dout[..., None] / W, x.shape).copy()


def dense_forward(x, W, b):
    return x @ W.T + b


def dense_backward(dout, x, W):
    return dout @ W, dout.T @ x, dout.sum(axis=0)


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
