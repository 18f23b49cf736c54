"""Dense block tiles, the small-GEMM kernel and batch ordering.

A dense block is a C-contiguous two-dimensional ``float64`` numpy array.
"""

from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "Blocking",
    "BatchItem",
    "as_block",
    "zeros_block",
    "block_gemm_acc",
    "transpose_block",
    "order_batches",
]


def as_block(values, rows=None, cols=None):
    """Coerce ``values`` into a dense ``rows x cols`` block."""
    arr = np.array(values, dtype=np.float64, order="C")
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise InvalidArgumentError(
                f"{arr.size} values cannot fill a {rows}x{cols} block"
            )
        arr = arr.reshape(rows, cols)
    if arr.ndim != 2:
        raise InvalidArgumentError(f"a block must be two-dimensional, got ndim={arr.ndim}")
    return arr


def zeros_block(rows, cols):
    return np.zeros((rows, cols), dtype=np.float64)


def block_gemm_acc(c, a, b):
    """Accumulate ``c += a @ b`` in place with a fixed summation order.

    Each output element is updated as ``c[i, j] += a[i, p] * b[p, j]`` for
    ``p = 0, 1, ...`` in turn, i.e. the same rounding sequence as the naive
    i-k-j triple loop.  Returns ``c``.
    """
    if a.ndim != 2 or b.ndim != 2 or c.ndim != 2:
        raise InvalidArgumentError("blocks must be two-dimensional")
    m, k = a.shape
    k2, n = b.shape
    if k != k2 or c.shape != (m, n):
        raise InvalidArgumentError(
            f"cannot accumulate {a.shape} x {b.shape} into {c.shape}"
        )
    for p in range(k):
        c += np.multiply.outer(a[:, p], b[p, :])
    return c


def transpose_block(a):
    return np.ascontiguousarray(a.T)


class BatchItem(NamedTuple):
    """One small multiplication ``target[row, col] += a @ b`` (``k`` is the
    contracted block index)."""

    row: int
    col: int
    k: int
    a: np.ndarray
    b: np.ndarray


def order_batches(items):
    """Sort batch items by target row-block, then column-block, then k.

    All items writing into the same target row-block form one contiguous
    run, so runs can be handed to independent workers without locking.
    """
    return sorted(items, key=lambda it: (it.row, it.col, it.k))


class Blocking:
    """Block sizes along one matrix dimension, with prefix-sum offsets."""

    def __init__(self, sizes):
        sizes = np.asarray(sizes, dtype=np.int64).ravel()
        if sizes.size and sizes.min() < 1:
            raise InvalidArgumentError("block sizes must be positive")
        self.sizes = sizes
        self.offsets = np.zeros(sizes.size + 1, dtype=np.int64)
        np.cumsum(sizes, out=self.offsets[1:])

    def __len__(self):
        return int(self.sizes.size)

    @property
    def total(self):
        return int(self.offsets[-1])

    def size(self, i):
        return int(self.sizes[i])

    def offset(self, i):
        return int(self.offsets[i])

    def resident_entries(self):
        """Index entries held in memory by every rank using this blocking."""
        return int(self.sizes.size + self.offsets.size)

    def __eq__(self, other):
        if not isinstance(other, Blocking):
            return NotImplemented
        return len(self) == len(other) and all(
            self.size(i) == other.size(i) for i in range(len(self))
        )

    def __hash__(self):
        return hash(tuple(int(s) for s in self.sizes))

    def __repr__(self):
        return f"Blocking({self.sizes.tolist()})"
