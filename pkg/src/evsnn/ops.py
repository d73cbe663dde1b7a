"""Convolution, pooling and dense kernels with their adjoints.

All kernels are batched over the leading axis and work unchanged for
float64 and int64 inputs: pooling is exposed as a plain window sum so the
integer path never divides, and convolutions reduce to matmuls over
im2col views.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _cols(x, k, padding):
    """im2col: [B,C,H,W] -> ([B*OH*OW, C*k*k], OH, OW)."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    b, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * k * k)
    return cols, oh, ow


def conv2d(x, w, padding):
    """Stride-1 cross-correlation of x [B,C,H,W] with w [O,C,k,k]."""
    k = w.shape[-1]
    cols, oh, ow = _cols(x, k, padding)
    out = cols @ w.reshape(w.shape[0], -1).T
    return out.reshape(x.shape[0], oh, ow, w.shape[0]).transpose(0, 3, 1, 2)


def conv2d_grad_input(gout, w, padding):
    """Adjoint of conv2d in its input for stride 1."""
    k = w.shape[-1]
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d(gout, flipped, k - 1 - padding)


def conv2d_grad_weight(x, gout, padding, k):
    """Adjoint of conv2d in its weights, summed over the batch."""
    cols, oh, ow = _cols(x, k, padding)
    g = gout.transpose(0, 2, 3, 1).reshape(-1, gout.shape[1])
    return (g.T @ cols).reshape(gout.shape[1], x.shape[1], k, k)


def pool_sum(x, k):
    """Non-overlapping k x k window sums with ceil-mode output size.

    Partial windows at the top/right are zero-padded, so dividing by k*k
    afterwards averages over the full window area even at the edges.
    """
    b, c, h, w = x.shape
    oh, ow = -(-h // k), -(-w // k)
    xp = np.pad(x, ((0, 0), (0, 0), (0, oh * k - h), (0, ow * k - w)))
    return xp.reshape(b, c, oh, k, ow, k).sum(axis=(3, 5))


def pool_sum_grad(gout, k, in_h, in_w):
    """Adjoint of pool_sum: broadcast back and crop the ceil padding."""
    g = np.repeat(np.repeat(gout, k, axis=2), k, axis=3)
    return g[:, :, :in_h, :in_w]


def dense(x, w):
    """x [B,F] @ w[O,F]^T."""
    return x @ w.T


def dense_grad_input(gout, w):
    return gout @ w


def dense_grad_weight(x, gout):
    return gout.T @ x
