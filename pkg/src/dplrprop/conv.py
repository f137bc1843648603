"""2-D convolution and its adjoint on (C, H, W) arrays.

Zero padding, integer stride, no dilation or groups. Kernels are laid out
``(out_c, in_c, kh, kw)``. Both functions accept any number of leading axes
so that a stack of factor columns is convolved in one call.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dplrprop._linalg import rows_times
from dplrprop.decompose import CongruenceOperator
from dplrprop.errors import ShapeError


def conv_output_hw(h, w, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    return ho, wo


def _patches(x, kh, kw, stride, padding):
    """(..., C, H, W) -> (..., Ho*Wo, C*kh*kw)."""
    pad = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    xp = np.pad(x, pad) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    c, ho, wo = win.shape[-5], win.shape[-4], win.shape[-3]
    win = np.moveaxis(win, -5, -3)  # (..., Ho, Wo, C, kh, kw)
    return win.reshape(x.shape[:-3] + (ho * wo, c * kh * kw)), ho, wo


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation as in common deep learning frameworks (no bias)."""
    x = np.asarray(x, dtype=np.float64)
    o, c, kh, kw = kernel.shape
    if x.shape[-3] != c:
        raise ShapeError(f"input has {x.shape[-3]} channels, kernel expects {c}")
    cols, ho, wo = _patches(x, kh, kw, stride, padding)
    out = rows_times(cols, np.ascontiguousarray(kernel.reshape(o, -1).T))
    return np.moveaxis(out, -1, -2).reshape(x.shape[:-3] + (o, ho, wo))


def conv2d_per_item(x, kernels, stride=1, padding=0):
    """Convolve ``x[i]`` with its own kernel ``kernels[i]`` (leading axis N)."""
    o, c, kh, kw = kernels.shape[-4:]
    cols, ho, wo = _patches(np.asarray(x, dtype=np.float64), kh, kw, stride, padding)
    kmat = np.swapaxes(kernels.reshape(kernels.shape[:-4] + (o, -1)), -1, -2)
    out = cols @ kmat
    return np.moveaxis(out, -1, -2).reshape(x.shape[:-3] + (o, ho, wo))


def conv_transpose2d(y, kernel, in_hw, stride=1, padding=0):
    """Adjoint of :func:`conv2d` for an input of spatial size ``in_hw``."""
    y = np.asarray(y, dtype=np.float64)
    o, c, kh, kw = kernel.shape
    h, w = in_hw
    ho, wo = y.shape[-2:]
    lead = y.shape[:-3]
    rows = np.moveaxis(y.reshape(lead + (o, ho * wo)), -1, -2)
    cols = rows_times(rows, np.ascontiguousarray(kernel.reshape(o, -1)))
    cols = cols.reshape(lead + (ho, wo, c, kh, kw))
    xp = np.zeros(lead + (c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            patch = np.moveaxis(cols[..., i, j], -1, -3)  # (..., C, Ho, Wo)
            xp[..., :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += patch
    if padding:
        xp = xp[..., padding:padding + h, padding:padding + w]
    return xp


def conv_operator(kernel, in_shape, stride=1, padding=0) -> CongruenceOperator:
    """Congruence operator for a convolution acting on flattened (C, H, W) vectors."""
    kernel = np.asarray(kernel, dtype=np.float64)
    c, h, w = in_shape
    o = kernel.shape[0]
    ho, wo = conv_output_hw(h, w, kernel.shape[2], kernel.shape[3], stride, padding)
    k_sq = np.square(kernel)

    def apply(x):
        x = np.asarray(x)
        out = conv2d(x.reshape(x.shape[:-1] + (c, h, w)), kernel, stride, padding)
        return out.reshape(x.shape[:-1] + (o * ho * wo,))

    def apply_transpose(y):
        y = np.asarray(y)
        out = conv_transpose2d(y.reshape(y.shape[:-1] + (o, ho, wo)), kernel, (h, w), stride, padding)
        return out.reshape(y.shape[:-1] + (c * h * w,))

    def diag_of_scaled(lam):
        lam = np.asarray(lam)
        out = conv2d(lam.reshape(lam.shape[:-1] + (c, h, w)), k_sq, stride, padding)
        return out.reshape(lam.shape[:-1] + (o * ho * wo,))

    return CongruenceOperator(apply, apply_transpose, diag_of_scaled, c * h * w, o * ho * wo)
