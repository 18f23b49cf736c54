"""Blocked-CSR sparse matrices distributed over a 2D process grid.

Blocks are owned according to a pair of distributions that map block-rows
to grid rows and block-columns to grid columns.  Each grid position keeps a
:class:`LocalCSR` store for the blocks it owns.  Grid positions are mapped to
communicator ranks through ``ranks`` (identity by default), which lets a
matrix live on a subset of a larger communicator.
"""

import bisect
import math

import numpy as np

from .blocks import Blocking, as_block, transpose_block
from .errors import InvalidArgumentError, OwnershipError
from .grid_comm import ProcessGrid, run_spmd, personalized_exchange

__all__ = [
    "Distribution",
    "FuncDistribution",
    "FuncBlocking",
    "LocalCSR",
    "DistMatrix",
    "round_robin",
    "new_matrix",
    "put_block",
    "get_block",
    "occupancy",
    "transpose",
    "add",
    "trace",
    "to_dense",
    "from_dense",
    "random_matrix",
    "redistribute",
    "scatter_blocks",
]


# ---------------------------------------------------------------------------
# index data


class Distribution:
    """Explicit block-index -> grid-coordinate map."""

    def __init__(self, coords):
        self.coords = np.asarray(coords, dtype=np.int64).ravel()

    def coord(self, i):
        return int(self.coords[i])

    def __len__(self):
        return int(self.coords.size)

    def resident_entries(self):
        return int(self.coords.size)

    def same_as(self, other):
        return len(self) == len(other) and all(
            self.coord(i) == other.coord(i) for i in range(len(self))
        )

    def __repr__(self):
        return f"Distribution({self.coords.tolist()})"


class FuncDistribution:
    """Distribution computed on demand; nothing is stored per block."""

    def __init__(self, fn, n):
        self.fn = fn
        self.n = int(n)

    def coord(self, i):
        if not 0 <= i < self.n:
            raise InvalidArgumentError(f"block index {i} outside [0, {self.n})")
        return int(self.fn(i))

    def __len__(self):
        return self.n

    def resident_entries(self):
        return 0

    same_as = Distribution.same_as


class FuncBlocking:
    """Blocking whose sizes (and optionally offsets) come from functions.

    Without ``offset_fn`` an offset is recomputed by summing sizes, which
    costs time but no memory.
    """

    def __init__(self, size_fn, n, offset_fn=None):
        self.size_fn = size_fn
        self.n = int(n)
        self.offset_fn = offset_fn

    def __len__(self):
        return self.n

    def size(self, i):
        if not 0 <= i < self.n:
            raise InvalidArgumentError(f"block index {i} outside [0, {self.n})")
        return int(self.size_fn(i))

    def offset(self, i):
        if self.offset_fn is not None:
            return int(self.offset_fn(i))
        return sum(self.size(t) for t in range(i))

    @property
    def total(self):
        if self.n == 0:
            return 0
        return self.offset(self.n - 1) + self.size(self.n - 1)

    @property
    def sizes(self):
        return np.array([self.size(i) for i in range(self.n)], dtype=np.int64)

    def resident_entries(self):
        return 0

    def __eq__(self, other):
        if not isinstance(other, (Blocking, FuncBlocking)):
            return NotImplemented
        return len(self) == len(other) and all(
            self.size(i) == other.size(i) for i in range(len(self))
        )

    __hash__ = None


def round_robin(n, extent):
    """Default distribution: block ``i`` goes to coordinate ``i mod extent``."""
    return Distribution(np.arange(n) % extent)


def _as_blocking(b):
    if isinstance(b, (Blocking, FuncBlocking)):
        return b
    return Blocking(b)


def _as_distribution(d, n, extent):
    if d is None:
        return round_robin(n, extent)
    if isinstance(d, (Distribution, FuncDistribution)):
        return d
    if callable(d):
        return FuncDistribution(d, n)
    return Distribution(d)


# ---------------------------------------------------------------------------
# local storage


class LocalCSR:
    """Blocks owned by one rank, in compressed sparse row order.

    Only block-rows holding at least one block are indexed, so the resident
    index is proportional to the number of stored blocks.
    """

    def __init__(self):
        self._rows = []
        self._cols = {}
        self._blocks = {}

    def get(self, i, j):
        cols = self._cols.get(i)
        if cols is None:
            return None
        t = bisect.bisect_left(cols, j)
        if t < len(cols) and cols[t] == j:
            return self._blocks[i][t]
        return None

    def put(self, i, j, block, accumulate=False):
        cols = self._cols.get(i)
        if cols is None:
            bisect.insort(self._rows, i)
            self._cols[i] = [j]
            self._blocks[i] = [block]
            return
        t = bisect.bisect_left(cols, j)
        if t < len(cols) and cols[t] == j:
            if accumulate:
                self._blocks[i][t] += block
            else:
                self._blocks[i][t] = block
        else:
            cols.insert(t, j)
            self._blocks[i].insert(t, block)

    def items(self):
        for i in self._rows:
            for j, blk in zip(self._cols[i], self._blocks[i]):
                yield i, j, blk

    def row(self, i):
        return list(zip(self._cols.get(i, ()), self._blocks.get(i, ())))

    @property
    def rows(self):
        return list(self._rows)

    @property
    def nblocks(self):
        return sum(len(c) for c in self._cols.values())

    @property
    def elements(self):
        return sum(b.size for bl in self._blocks.values() for b in bl)

    def to_csr(self):
        """Return ``(row_indices, row_ptr, col_indices, blocks)`` arrays."""
        rows = np.array(self._rows, dtype=np.int64)
        row_ptr = np.zeros(len(self._rows) + 1, dtype=np.int64)
        cols, blocks = [], []
        for t, i in enumerate(self._rows):
            cols.extend(self._cols[i])
            blocks.extend(self._blocks[i])
            row_ptr[t + 1] = len(cols)
        return rows, row_ptr, np.array(cols, dtype=np.int64), blocks

    def index_entries(self, axis):
        return len(self._rows) if axis == 0 else self.nblocks

    def clear(self):
        self._rows.clear()
        self._cols.clear()
        self._blocks.clear()

    def check(self):
        if self._rows != sorted(set(self._rows)):
            raise AssertionError("block-row list is not strictly increasing")
        for i in self._rows:
            cols = self._cols[i]
            if not cols or any(a >= b for a, b in zip(cols, cols[1:])):
                raise AssertionError(f"columns of block-row {i} not strictly increasing")
            if len(cols) != len(self._blocks[i]):
                raise AssertionError("column and block lists out of sync")


# ---------------------------------------------------------------------------
# the matrix


class DistMatrix:
    """A block-sparse matrix distributed over a 2D grid."""

    def __init__(self, row_blocking, col_blocking, grid, row_dist=None, col_dist=None, ranks=None):
        if not isinstance(grid, ProcessGrid):
            grid = ProcessGrid(tuple(grid))
        if grid.ndim != 2:
            raise InvalidArgumentError(f"matrices need a 2D grid, got dims {grid.dims}")
        self.row_blocking = _as_blocking(row_blocking)
        self.col_blocking = _as_blocking(col_blocking)
        self.grid = grid
        self.row_dist = _as_distribution(row_dist, len(self.row_blocking), grid.dims[0])
        self.col_dist = _as_distribution(col_dist, len(self.col_blocking), grid.dims[1])
        for name, dist, blocking, extent in (
            ("row", self.row_dist, self.row_blocking, grid.dims[0]),
            ("column", self.col_dist, self.col_blocking, grid.dims[1]),
        ):
            if len(dist) != len(blocking):
                raise InvalidArgumentError(
                    f"{name} distribution has {len(dist)} entries for {len(blocking)} blocks"
                )
            for i in range(len(dist)):
                if not 0 <= dist.coord(i) < extent:
                    raise InvalidArgumentError(
                        f"{name} block {i} mapped to coordinate {dist.coord(i)} "
                        f"outside grid extent {extent}"
                    )
        self.ranks = tuple(range(grid.size)) if ranks is None else tuple(int(r) for r in ranks)
        if len(self.ranks) != grid.size or len(set(self.ranks)) != grid.size:
            raise InvalidArgumentError("ranks must list one distinct rank per grid position")
        self._position = {r: p for p, r in enumerate(self.ranks)}
        self.stores = [LocalCSR() for _ in range(grid.size)]

    # -- shape and layout --

    @property
    def shape(self):
        return self.row_blocking.total, self.col_blocking.total

    @property
    def nblkrows(self):
        return len(self.row_blocking)

    @property
    def nblkcols(self):
        return len(self.col_blocking)

    def owner_coords(self, i, j):
        return self.row_dist.coord(i), self.col_dist.coord(j)

    def owner(self, i, j):
        """Communicator rank that owns block ``(i, j)``."""
        return self.ranks[self.grid.rank_of(self.owner_coords(i, j))]

    def grid_coords_of(self, rank):
        return self.grid.coords_of(self._position[rank])

    def has_rank(self, rank):
        return rank in self._position

    def local(self, rank):
        try:
            return self.stores[self._position[rank]]
        except KeyError:
            raise OwnershipError(f"rank {rank} holds no part of this matrix") from None

    def same_layout(self, other):
        return (
            self.grid == other.grid
            and self.ranks == other.ranks
            and self.row_blocking == other.row_blocking
            and self.col_blocking == other.col_blocking
            and self.row_dist.same_as(other.row_dist)
            and self.col_dist.same_as(other.col_dist)
        )

    def empty_like(self):
        return DistMatrix(
            self.row_blocking, self.col_blocking, self.grid, self.row_dist, self.col_dist, self.ranks
        )

    def copy(self):
        out = self.empty_like()
        for store, src in zip(out.stores, self.stores):
            for i, j, blk in src.items():
                store.put(i, j, blk.copy())
        return out

    # -- block access --

    def _check_dims(self, i, j, block):
        if not (0 <= i < self.nblkrows and 0 <= j < self.nblkcols):
            raise InvalidArgumentError(f"block ({i}, {j}) outside {self.nblkrows}x{self.nblkcols}")
        if block is not None:
            want = (self.row_blocking.size(i), self.col_blocking.size(j))
            if block.shape != want:
                raise InvalidArgumentError(
                    f"block ({i}, {j}) must be {want[0]}x{want[1]}, got {block.shape}"
                )

    def put_block(self, i, j, block, accumulate=False, rank=None):
        """Store (or add into) block ``(i, j)``.

        When ``rank`` is given the call is made on behalf of that rank and
        must respect ownership.
        """
        block = as_block(block)
        self._check_dims(i, j, block)
        owner = self.owner(i, j)
        if rank is not None and rank != owner:
            raise OwnershipError(f"rank {rank} does not own block ({i}, {j}); rank {owner} does")
        self.local(owner).put(i, j, block.copy(), accumulate)

    def get_block(self, i, j, rank=None):
        """Return the stored block or ``None``."""
        self._check_dims(i, j, None)
        owner = self.owner(i, j)
        if rank is not None and rank != owner:
            raise OwnershipError(f"rank {rank} does not own block ({i}, {j}); rank {owner} does")
        return self.local(owner).get(i, j)

    def iter_blocks(self):
        """All stored blocks, rank by rank in CSR order."""
        for store in self.stores:
            yield from store.items()

    def sorted_blocks(self):
        return sorted(self.iter_blocks(), key=lambda t: (t[0], t[1]))

    @property
    def nblocks_stored(self):
        return sum(s.nblocks for s in self.stores)

    def stored_elements(self):
        return sum(s.elements for s in self.stores)

    def occupancy(self):
        m, n = self.shape
        if m == 0 or n == 0:
            return 0.0
        return self.stored_elements() / (m * n)

    def index_storage(self, rank, axis):
        """Resident index entries on ``rank`` along ``axis`` (0 rows, 1 columns).

        Counts replicated blocking and distribution arrays plus the local
        CSR index.
        """
        blocking, dist = (
            (self.row_blocking, self.row_dist) if axis == 0 else (self.col_blocking, self.col_dist)
        )
        return (
            blocking.resident_entries()
            + dist.resident_entries()
            + self.local(rank).index_entries(axis)
        )

    def check(self):
        """Raise ``AssertionError`` unless the storage is well formed."""
        for pos, store in enumerate(self.stores):
            store.check()
            rank = self.ranks[pos]
            for i, j, blk in store.items():
                if self.owner(i, j) != rank:
                    raise AssertionError(f"block ({i}, {j}) stored on rank {rank}, not its owner")
                self._check_dims(i, j, blk)

    def __repr__(self):
        m, n = self.shape
        return (
            f"DistMatrix({m}x{n}, blocks {self.nblkrows}x{self.nblkcols}, "
            f"grid {self.grid.dims}, stored {self.nblocks_stored})"
        )


# ---------------------------------------------------------------------------
# operations


def new_matrix(row_blocking, col_blocking, grid, row_dist=None, col_dist=None, ranks=None):
    return DistMatrix(row_blocking, col_blocking, grid, row_dist, col_dist, ranks)


def put_block(m, i, j, block, accumulate=False, rank=None):
    m.put_block(i, j, block, accumulate=accumulate, rank=rank)


def get_block(m, i, j, rank=None):
    return m.get_block(i, j, rank=rank)


def occupancy(m):
    return m.occupancy()


def transpose(m):
    """Transpose ``m`` without moving data between ranks.

    The result lives on the transposed grid, with ranks permuted so that
    every block stays on the rank that already holds it.
    """
    r, c = m.grid.dims
    tgrid = ProcessGrid((c, r))
    tranks = [m.ranks[b * c + a] for a in range(c) for b in range(r)]
    out = DistMatrix(m.col_blocking, m.row_blocking, tgrid, m.col_dist, m.row_dist, tranks)
    for pos, store in enumerate(m.stores):
        rank = m.ranks[pos]
        dst = out.local(rank)
        for i, j, blk in store.items():
            dst.put(j, i, transpose_block(blk))
    return out


def add(a, b, alpha=1.0, beta=1.0):
    """``a <- alpha * a + beta * b`` in place; returns ``a``."""
    if not a.same_layout(b):
        raise InvalidArgumentError("add needs identical blockings, grids and distributions")
    for sa, sb in zip(a.stores, b.stores):
        if alpha != 1.0:
            for _, _, blk in sa.items():
                blk *= alpha
        for i, j, blk in sb.items():
            sa.put(i, j, beta * blk, accumulate=sa.get(i, j) is not None)
    return a


def trace(m):
    if m.row_blocking != m.col_blocking:
        raise InvalidArgumentError("trace needs a square matrix with equal row and column blocking")
    total = 0.0
    for i in range(m.nblkrows):
        blk = m.get_block(i, i)
        if blk is not None:
            total += float(np.trace(blk))
    return total


def to_dense(m):
    """Gather ``m`` into a full dense array (test utility)."""
    rows, cols = m.shape
    out = np.zeros((rows, cols))
    for i, j, blk in m.iter_blocks():
        r0 = m.row_blocking.offset(i)
        c0 = m.col_blocking.offset(j)
        out[r0 : r0 + blk.shape[0], c0 : c0 + blk.shape[1]] = blk
    return out


def from_dense(dense, row_sizes, col_sizes, grid, mask=None, row_dist=None, col_dist=None, ranks=None):
    """Cut a dense array into blocks.

    ``mask`` (block-rows x block-cols booleans) selects the blocks to store;
    by default blocks that are entirely zero are skipped.
    """
    m = DistMatrix(row_sizes, col_sizes, grid, row_dist, col_dist, ranks)
    dense = np.asarray(dense, dtype=np.float64)
    if dense.shape != m.shape:
        raise InvalidArgumentError(f"dense shape {dense.shape} does not match blocking {m.shape}")
    for i in range(m.nblkrows):
        r0, rs = m.row_blocking.offset(i), m.row_blocking.size(i)
        for j in range(m.nblkcols):
            c0, cs = m.col_blocking.offset(j), m.col_blocking.size(j)
            blk = dense[r0 : r0 + rs, c0 : c0 + cs]
            keep = mask[i][j] if mask is not None else bool(np.any(blk))
            if keep:
                m.put_block(i, j, blk)
    return m


def random_matrix(row_sizes, col_sizes, grid, occupancy, rng, row_dist=None, col_dist=None, ranks=None):
    """Blocks present independently with probability ``occupancy``; values N(0, 1)."""
    m = DistMatrix(row_sizes, col_sizes, grid, row_dist, col_dist, ranks)
    for i in range(m.nblkrows):
        for j in range(m.nblkcols):
            if rng.random() < occupancy:
                shape = (m.row_blocking.size(i), m.col_blocking.size(j))
                m.put_block(i, j, rng.standard_normal(shape))
    return m


def scatter_blocks(ctx, members, items, dst, *, phase, accumulate=True):
    """Send ``(i, j, block)`` items to their owners in ``dst`` and store them.

    Collective over ``members`` (which must contain every sender and every
    owner in ``dst``).  Runs as a bucketed personalized exchange.
    """
    buckets = {}
    for i, j, blk in items:
        buckets.setdefault(dst.owner(i, j), {})[(i, j)] = blk
    received = personalized_exchange(ctx, members, buckets, phase=phase)
    if dst.has_rank(ctx.rank):
        store = dst.local(ctx.rank)
        for payload in received:
            for (i, j), blk in (payload or {}).items():
                if accumulate and store.get(i, j) is not None:
                    store.put(i, j, blk, accumulate=True)
                else:
                    store.put(i, j, blk)


def redistribute_rank(ctx, src, dst, *, phase="redistribute", transform=None):
    """Per-rank body of :func:`redistribute` (usable inside larger programs)."""
    members = sorted(set(src.ranks) | set(dst.ranks))
    if ctx.rank not in members:
        return
    items = src.local(ctx.rank).items() if src.has_rank(ctx.rank) else ()
    if transform is not None:
        items = (transform(i, j, blk) for i, j, blk in items)
    scatter_blocks(ctx, members, items, dst, phase=phase)


def redistribute(m, new_grid, new_row_dist=None, new_col_dist=None, ranks=None, *, ledger=None, schedule=None):
    """Copy ``m`` onto a new grid/distribution; only blocks that change rank
    are communicated."""
    if not isinstance(new_grid, ProcessGrid):
        new_grid = ProcessGrid(tuple(new_grid))
    if new_grid.ndim == 1:
        new_grid = ProcessGrid((new_grid.dims[0], 1))
    dst = DistMatrix(m.row_blocking, m.col_blocking, new_grid, new_row_dist, new_col_dist, ranks)
    if sorted(dst.ranks) != sorted(m.ranks):
        raise InvalidArgumentError("redistribution must keep the same set of ranks")
    size = max(max(m.ranks), max(dst.ranks)) + 1
    run_spmd(size, lambda ctx: redistribute_rank(ctx, m, dst), ledger=ledger, schedule=schedule)
    return dst


def linear_grid(nprocs):
    """A ``P x 1`` grid, the 2D form of a linear process grid."""
    return ProcessGrid((nprocs, 1))


def ceil_div(a, b):
    return -(-a // b)


def nearest_square(nprocs):
    return math.isqrt(nprocs) ** 2
