"""Reference (exact float) kernels on plain numpy arrays.

Every approximate kernel in the package is checked against these.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import counters

DTYPE = np.float32


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0):
    """Unfold ``x[N,C,H,W]`` into patches.

    Returns ``(cols, (Ho, Wo))`` with ``cols[N, Ho*Wo, C*kh*kw]``; the patch axis
    is ordered (channel, row, col) to match ``w.reshape(K, -1)``.
    """
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return cols, (ho, wo)


def col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col` (sums overlapping patch contributions)."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    d = dcols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def check_conv_shapes(x: np.ndarray, w: np.ndarray, bias, stride: int, pad: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects x[N,C,H,W] and w[K,C,kh,kw], got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    if bias is not None and np.shape(bias) != (w.shape[0],):
        raise ValueError(f"bias shape {np.shape(bias)} does not match {w.shape[0]} output channels")
    for size, k in zip(x.shape[2:], w.shape[2:]):
        if size + 2 * pad < k:
            raise ValueError(f"kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")


def conv2d_exact(x, w, bias=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation ``y[n,k] = sum_c x[n,c] * w[k,c] + bias[k]``."""
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    check_conv_shapes(x, w, bias, stride, pad)
    k, _, kh, kw = w.shape
    cols, (ho, wo) = im2col(x, kh, kw, stride, pad)
    counters.bump("dense_flops", 2 * cols.shape[0] * cols.shape[1] * cols.shape[2] * k)
    y = cols @ w.reshape(k, -1).T
    if bias is not None:
        y = y + np.asarray(bias, dtype=DTYPE)
    return np.ascontiguousarray(y.transpose(0, 2, 1).reshape(x.shape[0], k, ho, wo))


def linear_exact(x, w, bias=None) -> np.ndarray:
    """``y = x @ w.T + bias``."""
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear expects x[N,D] and w[M,D], got {x.shape} and {w.shape}")
    if bias is not None and np.shape(bias) != (w.shape[0],):
        raise ValueError(f"bias shape {np.shape(bias)} does not match {w.shape[0]} outputs")
    counters.bump("dense_flops", 2 * x.shape[0] * x.shape[1] * w.shape[0])
    y = x @ w.T
    if bias is not None:
        y = y + np.asarray(bias, dtype=DTYPE)
    return y.astype(DTYPE, copy=False)


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), 0)


def maxpool2x2(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    n, c, h, w = x.shape
    x = x[:, :, : h - h % 2, : w - w % 2]
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
