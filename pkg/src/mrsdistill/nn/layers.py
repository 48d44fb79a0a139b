"""Forward/backward kernels for the layers used by the residual 1D CNN.

Tensors are numpy arrays laid out ``[batch, length, channels]``. Every
``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
consumes the upstream gradient plus that cache.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, ShapeError


def same_padding(length: int, width: int, stride: int) -> tuple[int, int, int]:
    """Return ``(out_length, pad_left, pad_right)`` for "same" padding.

    ``out_length = ceil(length / stride)``; the total padding is split with the
    extra sample (even widths) on the right.
    """
    out = -(-length // stride)
    total = max((out - 1) * stride + width - length, 0)
    return out, total // 2, total - total // 2


# -- convolution -----------------------------------------------------------


def conv1d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1):
    """Cross-correlation with "same" zero padding.

    x: [batch, length, c_in], w: [width, c_in, c_out] -> [batch, ceil(length/stride), c_out]
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    b, length, c_in = x.shape
    width, _, c_out = w.shape
    out, left, right = same_padding(length, width, stride)
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    win = sliding_window_view(xp, width, axis=1)[:, ::stride][:, :out]  # [b, out, c_in, width]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(b * out, width * c_in)
    y = cols @ w.reshape(width * c_in, c_out)
    cache = (cols, w, stride, x.shape, (out, left, right))
    return y.reshape(b, out, c_out), cache


def conv1d_backward(dy: np.ndarray, cache):
    """Return ``(dx, dw)``.

    ``dx`` is computed as a correlation of the zero-dilated, fully padded
    upstream gradient with the flipped, transposed kernel (one matmul instead
    of a scatter-add over kernel taps).
    """
    cols, w, stride, x_shape, (out, left, right) = cache
    b, length, c_in = x_shape
    width, _, c_out = w.shape
    dy2 = dy.reshape(b * out, c_out)
    dw = (cols.T @ dy2).reshape(width, c_in, c_out)

    span = stride * (out - 1) + 1
    z = np.zeros((b, max(span + 2 * (width - 1), left + length + width - 1), c_out), dtype=dy.dtype)
    z[:, width - 1:width - 1 + span:stride] = dy
    win = sliding_window_view(z, width, axis=1)[:, left:left + length]  # [b, length, c_out, width]
    dcols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(b * length, width * c_out)
    w_flip = np.ascontiguousarray(w[::-1].transpose(0, 2, 1)).reshape(width * c_out, c_in)
    return (dcols @ w_flip).reshape(b, length, c_in), dw


# -- batch normalization -----------------------------------------------------


def batchnorm_forward(x, gamma, beta, running_mean, running_var, *, train: bool,
                      eps: float = 1e-5, momentum: float = 0.9):
    """Per-channel normalization over the batch and length axes.

    In train mode the running statistics are updated in place:
    ``running = momentum * running + (1 - momentum) * batch_stat``.
    """
    if x.shape[0] == 0:
        raise ConfigError("batch norm on an empty batch")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"batchnorm: input {x.shape} vs gamma {gamma.shape} beta {beta.shape}")
    if train:
        mean = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = gamma * xhat + beta
    return y, (xhat, inv_std, gamma, train)


def batchnorm_backward(dy, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = np.sum(dy * xhat, axis=(0, 1))
    dbeta = np.sum(dy, axis=(0, 1))
    dxhat = dy * gamma
    if train:
        n = dy.shape[0] * dy.shape[1]
        dx = inv_std / n * (
            n * dxhat
            - dxhat.sum(axis=(0, 1))
            - xhat * np.sum(dxhat * xhat, axis=(0, 1))
        )
    else:
        dx = dxhat * inv_std
    return dx, dgamma, dbeta


# -- elementwise / pooling ----------------------------------------------------


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float64):
    """Inverted-dropout mask: kept units are scaled by ``1 / (1 - rate)``."""
    if rate <= 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def maxpool2_forward(x):
    """Max-pool of width 2, stride 2 along the length axis (odd lengths keep the tail)."""
    b, length, c = x.shape
    if length % 2:
        x = np.concatenate([x, np.full((b, 1, c), -np.inf, dtype=x.dtype)], axis=1)
    pairs = x.reshape(b, -1, 2, c)
    pick = pairs[:, :, 1] > pairs[:, :, 0]  # ties go to the first element
    y = np.where(pick, pairs[:, :, 1], pairs[:, :, 0])
    return y, (pick, length)


def maxpool2_backward(dy, cache):
    pick, length = cache
    b, half, c = dy.shape
    dx = np.zeros((b, half, 2, c), dtype=dy.dtype)
    dx[:, :, 0] = np.where(pick, 0.0, dy)
    dx[:, :, 1] = np.where(pick, dy, 0.0)
    return dx.reshape(b, 2 * half, c)[:, :length]


def pad_channels(x, c_out: int):
    c_in = x.shape[-1]
    if c_out == c_in:
        return x
    return np.concatenate([x, np.zeros(x.shape[:-1] + (c_out - c_in,), dtype=x.dtype)], axis=-1)


# -- head ------------------------------------------------------------------------


def gap_forward(x):
    return x.mean(axis=1)


def gap_backward(dy, length: int):
    return np.repeat(dy[:, None, :] / length, length, axis=1)


def dense_forward(x, w, b):
    """x: [batch, d], w: [n_out, d], b: [n_out]."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    return x @ w.T + b


def dense_backward(dy, x, w):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


PROB_FLOOR = 1e-300


def cross_entropy_loss(probabilities, labels) -> float:
    """Mean of ``-ln p[true class]`` with probabilities clamped at a tiny floor."""
    p = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    picked = p[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy from logits and its gradient with respect to the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n
