"""Batch-first tensor kernels for every supported layer kind.

All kernels take a leading batch axis and channels-last layout, i.e. images are
``(N, H, W, C)`` and sequences ``(N, L, C)``. They are dtype-preserving, so the
simulator can run them on float64 arrays that hold exact integers.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None,
           stride: tuple[int, int] = (1, 1)) -> np.ndarray:
    """Valid 2-D convolution (cross-correlation, as in Keras).

    ``kernel`` has shape ``(kh, kw, c_in, c_out)``.
    """
    kh, kw = kernel.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride[0], ::stride[1]]
    # win: (N, oh, ow, c_in, kh, kw)
    out = np.tensordot(win, kernel, axes=([4, 5, 3], [0, 1, 2]))
    if bias is not None:
        out = out + bias
    return out


def depthwise_conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None,
                     stride: tuple[int, int] = (1, 1)) -> np.ndarray:
    """Valid depthwise convolution with depth multiplier 1; ``kernel`` is ``(kh, kw, c)``."""
    kh, kw = kernel.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride[0], ::stride[1]]
    out = np.einsum("nhwcij,ijc->nhwc", win, kernel)
    if bias is not None:
        out = out + bias
    return out


def conv1d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1) -> np.ndarray:
    """Valid 1-D convolution over ``(N, L, C)``; ``kernel`` is ``(k, c_in, c_out)``."""
    k = kernel.shape[0]
    win = sliding_window_view(x, k, axis=1)[:, ::stride]
    # win: (N, ol, c_in, k)
    out = np.tensordot(win, kernel, axes=([3, 2], [0, 1]))
    if bias is not None:
        out = out + bias
    return out


def dense(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    out = x @ kernel
    if bias is not None:
        out = out + bias
    return out


def _pool_windows(x: np.ndarray, pool: tuple[int, int], stride: tuple[int, int]) -> np.ndarray:
    return sliding_window_view(x, pool, axis=(1, 2))[:, ::stride[0], ::stride[1]]


def avg_pool2d(x, pool, stride):
    return _pool_windows(x, pool, stride).mean(axis=(-2, -1))


def sum_pool2d(x, pool, stride):
    return _pool_windows(x, pool, stride).sum(axis=(-2, -1))


def max_pool2d(x, pool, stride):
    return _pool_windows(x, pool, stride).max(axis=(-2, -1))


def zero_pad(x: np.ndarray, pad: tuple[tuple[int, int], ...]) -> np.ndarray:
    """Zero-pad the spatial axes (every axis between batch and channels)."""
    widths = [(0, 0), *pad, (0, 0)]
    return np.pad(x, widths)


def batch_norm(x: np.ndarray, stats: np.ndarray, epsilon: float) -> np.ndarray:
    """``stats`` rows are gamma, beta, moving mean, moving variance."""
    gamma, beta, mean, var = stats
    return (x - mean) * (gamma / np.sqrt(var + epsilon)) + beta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
