"""Batch-stable matrix products.

OpenBLAS picks different kernels (gemv for one row, edge and small-matrix
kernels for ragged row counts) depending on how many rows a product has,
and these round differently. Every product that touches per-item data goes
through :func:`rows_times`, which always multiplies fixed-height row
blocks, so an item's result does not depend on how many other items share
the call or where it sits in the batch.
"""

import numpy as np

ROW_BLOCK = 32


def rows_times(x, mat_t):
    """Return ``x @ mat_t`` over the last axis of ``x``.

    ``x`` has shape ``(..., k)`` and ``mat_t`` shape ``(k, m)``. Rows are
    multiplied in zero-padded blocks of exactly ``ROW_BLOCK``.
    """
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    k, m = mat_t.shape
    flat = x.reshape(-1, k)
    rows = flat.shape[0]
    if rows == 0:
        return np.zeros(lead + (m,))
    full = rows - rows % ROW_BLOCK
    out = np.empty((full + (ROW_BLOCK if full < rows else 0), m))
    for start in range(0, full, ROW_BLOCK):
        np.matmul(flat[start:start + ROW_BLOCK], mat_t, out=out[start:start + ROW_BLOCK])
    if full < rows:
        tail = np.zeros((ROW_BLOCK, k))
        tail[:rows - full] = flat[full:]
        np.matmul(tail, mat_t, out=out[full:])
    return out[:rows].reshape(lead + (m,))


def rank_major(a, copy=False):
    """Copy of ``a`` (shape ``(..., n, r)``) stored with the ``r`` axis outermost.

    Reductions over a short trailing axis are slow in numpy when that axis is
    contiguous; with this layout each column is a contiguous vector instead.
    """
    a = np.asarray(a, dtype=np.float64).swapaxes(-1, -2)
    return (np.array(a, order="C") if copy else np.ascontiguousarray(a)).swapaxes(-1, -2)


def apply_to_columns(fn, v):
    """Apply a row-vector map ``fn`` to each column of ``v`` with shape (..., n, r)."""
    cols = np.swapaxes(v, -1, -2)
    return np.swapaxes(fn(cols), -1, -2)
