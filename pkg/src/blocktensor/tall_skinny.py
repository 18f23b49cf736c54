"""Tall-and-skinny matrices split into roughly square submatrices.

The long matrix dimension is cut into ``f`` contiguous block ranges and
submatrix ``s`` lives on subgroup ``s`` of the process grid.  Block sizes
and distributions are supplied by functions (:class:`IndexFuncs`), so no
rank holds an index array whose length is the full block count.

Global block ``i`` of the split dimension maps to submatrix ``i // chunk``
at local index ``i % chunk``, where ``chunk = ceil(n / f)``.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArgumentError, LayoutError
from .grid_comm import ProcessGrid, personalized_exchange, run_spmd, split_grid
from .matrix import DistMatrix, FuncBlocking, FuncDistribution, ceil_div
from .mult_cannon import check_cannon_layout
from .mult_rect import choose_algorithm, make_work, multiply, multiply_rank, ring_reduce

__all__ = [
    "IndexFuncs",
    "TallSkinnyMatrix",
    "create_tall_skinny",
    "choose_split_factor",
    "multiply_tall_skinny",
    "random_tall_skinny",
]

DIM_NAMES = ("rows", "cols")


@dataclass(frozen=True)
class IndexFuncs:
    """Block sizes and distribution of one matrix dimension, as functions.

    ``dist_fn`` returns a grid coordinate; it is folded modulo the extent of
    whatever (sub)grid the dimension ends up on.  ``offset_fn`` is optional
    and saves summing sizes when offsets are needed.
    """

    block_size_fn: Callable[[int], int]
    dist_fn: Callable[[int], int]
    n_blocks: int
    offset_fn: Optional[Callable[[int], int]] = None

    def __post_init__(self):
        if self.n_blocks < 0:
            raise InvalidArgumentError("n_blocks must be >= 0")

    @classmethod
    def from_sizes(cls, sizes, dist=None):
        """Wrap explicit sizes (round-robin distribution unless ``dist``)."""
        sizes = [int(s) for s in sizes]
        offsets = np.concatenate([[0], np.cumsum(sizes, dtype=np.int64)])
        dist_fn = (lambda i: i) if dist is None else (lambda i: int(dist[i]))
        return cls(lambda i: sizes[i], dist_fn, len(sizes), lambda i: int(offsets[i]))

    @classmethod
    def uniform(cls, n_blocks, size):
        """``n_blocks`` blocks of ``size`` elements, round-robin distributed."""
        return cls(lambda i: size, lambda i: i, n_blocks, lambda i: i * size)

    def size(self, i):
        return int(self.block_size_fn(i))

    def offset(self, i):
        if i >= self.n_blocks:
            # one past the end
            return self.total
        if self.offset_fn is not None:
            return int(self.offset_fn(i))
        return sum(self.size(t) for t in range(i))

    @property
    def total(self):
        if self.n_blocks == 0:
            return 0
        return self.offset(self.n_blocks - 1) + self.size(self.n_blocks - 1)

    def matches(self, other):
        """Same block count and block sizes (distributions may differ)."""
        return self.n_blocks == other.n_blocks and all(
            self.size(i) == other.size(i) for i in range(self.n_blocks)
        )

    def blocking(self, start=0, count=None):
        """:class:`FuncBlocking` over blocks ``start .. start + count``."""
        count = self.n_blocks - start if count is None else count
        base = self.offset(start) if self.offset_fn is not None else None
        offset_fn = None
        if base is not None:
            offset_fn = lambda l: self.offset(start + l) - base
        return FuncBlocking(lambda l: self.size(start + l), count, offset_fn)

    def distribution(self, extent, start=0, count=None):
        count = self.n_blocks - start if count is None else count
        return FuncDistribution(lambda l: self.dist_fn(start + l) % extent, count)


class TallSkinnyMatrix:
    """A matrix whose ``split_dim`` is cut into ``factor`` submatrices.

    Parameters
    ----------
    rows, cols : IndexFuncs
        Index functions of the two global dimensions.
    grid : ProcessGrid
        2D grid the matrix lives on.
    split_dim : int
        Matrix dimension that is split (0 rows, 1 columns).
    factor : int
        Number of submatrices.
    grid_dim : int, optional
        Grid dimension divided into subgroups.  Defaults to the longer grid
        dimension (the first one on ties), so matrices on the same grid with
        the same factor share subgroups whatever they split.
    ranks : sequence of int, optional
        Communicator rank of each grid position (identity by default).
    """

    def __init__(self, rows, cols, grid, split_dim=0, factor=1, grid_dim=None, ranks=None):
        if not isinstance(grid, ProcessGrid):
            grid = ProcessGrid(tuple(grid))
        if grid.ndim != 2:
            raise InvalidArgumentError(f"tall-skinny matrices need a 2D grid, got {grid.dims}")
        if split_dim not in (0, 1):
            raise InvalidArgumentError(f"split_dim must be 0 or 1, got {split_dim}")
        if grid_dim is None:
            grid_dim = 0 if grid.dims[0] >= grid.dims[1] else 1
        self.rows, self.cols = rows, cols
        self.grid = grid
        self.split_dim = split_dim
        self.grid_dim = grid_dim
        self.factor = int(factor)
        self.ranks = tuple(range(grid.size)) if ranks is None else tuple(int(r) for r in ranks)
        if len(self.ranks) != grid.size:
            raise InvalidArgumentError("ranks must list one rank per grid position")
        # raises on an invalid factor
        self.subgroups = split_grid(grid, grid_dim, self.factor)
        n = self.funcs(split_dim).n_blocks
        self.chunk = max(ceil_div(n, self.factor), 1)
        self.submatrices = [self._make_sub(s) for s in range(self.factor)]
        self._group_of = {r: s for s, sub in enumerate(self.submatrices) for r in sub.ranks}

    def funcs(self, dim):
        return self.rows if dim == 0 else self.cols

    def block_range(self, s):
        """``(start, count)`` of the split-dimension blocks of submatrix ``s``."""
        n = self.funcs(self.split_dim).n_blocks
        start = min(s * self.chunk, n)
        return start, min(self.chunk, n - start)

    def _make_sub(self, s):
        group = self.subgroups[s]
        members = [self.ranks[m] for m in group.members]
        ext = group.grid.dims
        ranges = [(0, None), (0, None)]
        ranges[self.split_dim] = self.block_range(s)
        blockings = [self.funcs(d).blocking(*ranges[d]) for d in (0, 1)]
        dists = [self.funcs(d).distribution(ext[d], *ranges[d]) for d in (0, 1)]
        return DistMatrix(blockings[0], blockings[1], group.grid, dists[0], dists[1], members)

    # -- index mapping --

    @property
    def shape(self):
        return self.rows.total, self.cols.total

    @property
    def nblocks(self):
        return self.rows.n_blocks, self.cols.n_blocks

    def to_local(self, i, j):
        """Global block ``(i, j)`` -> ``(submatrix, local_i, local_j)``."""
        if not (0 <= i < self.rows.n_blocks and 0 <= j < self.cols.n_blocks):
            raise InvalidArgumentError(f"block ({i}, {j}) outside {self.nblocks}")
        g = (i, j)[self.split_dim]
        s, l = divmod(g, self.chunk)
        return (s, l, j) if self.split_dim == 0 else (s, i, l)

    def to_global(self, s, li, lj):
        start, _ = self.block_range(s)
        return (start + li, lj) if self.split_dim == 0 else (li, start + lj)

    def owner(self, i, j):
        s, li, lj = self.to_local(i, j)
        return self.submatrices[s].owner(li, lj)

    def submatrix_of_rank(self, rank):
        """Index of the submatrix whose subgroup contains ``rank``."""
        return self._group_of[rank]

    def local(self, rank):
        return self.submatrices[self._group_of[rank]].local(rank)

    def same_family(self, other):
        """True when both matrices use the same subgroups."""
        return (
            self.grid == other.grid
            and self.ranks == other.ranks
            and self.grid_dim == other.grid_dim
            and self.factor == other.factor
        )

    # -- block access --

    def put_block(self, i, j, block, accumulate=False):
        s, li, lj = self.to_local(i, j)
        self.submatrices[s].put_block(li, lj, block, accumulate=accumulate)

    def get_block(self, i, j):
        s, li, lj = self.to_local(i, j)
        return self.submatrices[s].get_block(li, lj)

    def iter_blocks(self):
        """Stored blocks with global indices."""
        for s, sub in enumerate(self.submatrices):
            for li, lj, blk in sub.iter_blocks():
                yield (*self.to_global(s, li, lj), blk)

    def stored_elements(self):
        return sum(sub.stored_elements() for sub in self.submatrices)

    def occupancy(self):
        m, n = self.shape
        return self.stored_elements() / (m * n) if m and n else 0.0

    def index_storage(self, rank, axis):
        """Resident index entries on ``rank`` along ``axis``."""
        return self.submatrices[self._group_of[rank]].index_storage(rank, axis)

    def to_dense(self):
        out = np.zeros(self.shape)
        for i, j, blk in self.iter_blocks():
            r0, c0 = self.rows.offset(i), self.cols.offset(j)
            out[r0 : r0 + blk.shape[0], c0 : c0 + blk.shape[1]] = blk
        return out

    def empty_like(self):
        return TallSkinnyMatrix(
            self.rows, self.cols, self.grid, self.split_dim, self.factor, self.grid_dim, self.ranks
        )

    def check(self):
        for sub in self.submatrices:
            sub.check()

    def __repr__(self):
        m, n = self.shape
        return (
            f"TallSkinnyMatrix({m}x{n}, split {DIM_NAMES[self.split_dim]} by {self.factor}, "
            f"grid {self.grid.dims})"
        )


def create_tall_skinny(rows_funcs, cols_funcs, grid, split_dim, split_factor, grid_dim=None, ranks=None):
    return TallSkinnyMatrix(rows_funcs, cols_funcs, grid, split_dim, split_factor, grid_dim, ranks)


def random_tall_skinny(rows, cols, grid, split_dim, factor, occupancy, rng, grid_dim=None):
    """Blocks present independently with probability ``occupancy``; values N(0, 1)."""
    m = TallSkinnyMatrix(rows, cols, grid, split_dim, factor, grid_dim)
    for i in range(rows.n_blocks):
        for j in range(cols.n_blocks):
            if rng.random() < occupancy:
                m.put_block(i, j, rng.standard_normal((rows.size(i), cols.size(j))))
    return m


def choose_split_factor(long_dim_elements, short_dim_elements, P):
    """Factor ``1 <= f <= P`` making ``long / f`` closest to ``short``.

    Ties go to the smaller factor.
    """
    if min(long_dim_elements, short_dim_elements, P) < 1:
        raise InvalidArgumentError("choose_split_factor needs positive inputs")
    return min(
        range(1, int(P) + 1),
        key=lambda f: (abs(long_dim_elements / f - short_dim_elements), f),
    )


# ---------------------------------------------------------------------------
# multiplication


def _split_name(m, names):
    """Name of the split matrix dimension, or ``None`` when unsplit."""
    return names[m.split_dim] if m.factor > 1 else None


def _check_funcs(x, y, dim):
    if not x.matches(y):
        raise LayoutError(f"index functions of dimension {dim} disagree", dim)


def _replica(src, group, ranks):
    """Empty copy of the unsplit ``src`` on one subgroup."""
    ext = group.grid.dims
    members = [ranks[m] for m in group.members]
    return DistMatrix(
        src.rows.blocking(),
        src.cols.blocking(),
        group.grid,
        src.rows.distribution(ext[0]),
        src.cols.distribution(ext[1]),
        members,
    )


def _replicate_rank(ctx, src, copies, members, phase):
    """Copy every block of ``src`` into each matrix of ``copies``."""
    outgoing = {}
    for i, j, blk in src.local(ctx.rank).items():
        for s, copy in enumerate(copies):
            outgoing.setdefault(copy.owner(i, j), {})[(s, i, j)] = blk
    for payload in personalized_exchange(ctx, members, outgoing, phase=phase):
        for (s, i, j), blk in (payload or {}).items():
            copies[s].local(ctx.rank).put(i, j, blk)


def _pick(algo, a, b, c):
    if algo == "auto" and 0 in a.shape + b.shape:
        # an empty piece of a ragged split; nothing to compute
        return "case1"
    if algo == "auto":
        return choose_algorithm(a, b, c)
    if algo == "cannon":
        check_cannon_layout(a, b, c)
    return algo


def multiply_tall_skinny(a, b, c, algo="auto", *, ledger=None, schedule=None):
    """``C += A @ B`` on tall-and-skinny operands.

    Supported layouts:

    * nothing split: a plain matrix multiplication;
    * K split in both A and B over the same subgroups: every subgroup
      multiplies its slabs and the partial results are ring-reduced onto
      C's owners;
    * M split in A and C (B unsplit) or N split in B and C (A unsplit):
      the unsplit operand is copied to every subgroup, then each subgroup
      updates its own piece of C.

    ``algo`` is used for every submatrix product (``"auto"`` picks per
    subgroup).  Returns ``c``.

    Raises
    ------
    LayoutError
        When the layouts do not fit any of the cases above; ``dimension``
        names the offending dimension (``"M"``, ``"N"`` or ``"K"``).
    """
    if not (a.grid == b.grid == c.grid and a.ranks == b.ranks == c.ranks):
        raise LayoutError("A, B and C must live on the same grid", "grid")
    _check_funcs(a.cols, b.rows, "K")
    _check_funcs(a.rows, c.rows, "M")
    _check_funcs(b.cols, c.cols, "N")
    sa, sb, sc = _split_name(a, "MK"), _split_name(b, "KN"), _split_name(c, "MN")
    members = sorted(a.ranks)

    if sa is None and sb is None and sc is None:
        multiply(a.submatrices[0], b.submatrices[0], c.submatrices[0], algo, ledger=ledger, schedule=schedule)
        return c

    if "K" in (sa, sb):
        if not (sa == sb == "K" and a.same_family(b)):
            raise LayoutError("K must be split identically in A and B", "K")
        return _multiply_split_k(a, b, c, algo, members, ledger, schedule)

    if "M" in (sa, sc):
        if not (sa == sc == "M" and a.same_family(c)):
            raise LayoutError("M must be split identically in A and C", "M")
        if sb is not None:
            raise LayoutError("B must not be split when M is split", "N")
        return _multiply_replicated(a, b, c, algo, members, ledger, schedule, resident="a")

    if not (sb == sc == "N" and b.same_family(c)):
        raise LayoutError("N must be split identically in B and C", "N")
    if sa is not None:
        raise LayoutError("A must not be split when N is split", "M")
    return _multiply_replicated(a, b, c, algo, members, ledger, schedule, resident="b")


def _multiply_split_k(a, b, c, algo, members, ledger, schedule):
    partials, plans = [], []
    for s, (a_s, b_s) in enumerate(zip(a.submatrices, b.submatrices)):
        c_s = DistMatrix(a_s.row_blocking, b_s.col_blocking, a_s.grid, a_s.row_dist, b_s.col_dist, a_s.ranks)
        name = _pick(algo, a_s, b_s, c_s)
        partials.append(c_s)
        plans.append((name, a_s, b_s, c_s, make_work(name, a_s, b_s, c_s)))

    def program(ctx):
        s = a.submatrix_of_rank(ctx.rank)
        multiply_rank(ctx, *plans[s])
        partial = {(i, j): blk for i, j, blk in partials[s].local(ctx.rank).items()}
        reduced = ring_reduce(ctx, members, partial, c.owner, phase="ts.reduce")
        for (i, j), blk in reduced.items():
            c.put_block(i, j, blk, accumulate=True)

    run_spmd(max(members) + 1, program, ledger=ledger, schedule=schedule)
    return c


def _multiply_replicated(a, b, c, algo, members, ledger, schedule, resident):
    split = a if resident == "a" else c
    other = b if resident == "a" else a
    copies = [_replica(other, g, split.ranks) for g in split.subgroups]
    plans = []
    for s, c_s in enumerate(c.submatrices):
        if resident == "a":
            a_s, b_s = a.submatrices[s], copies[s]
        else:
            a_s, b_s = copies[s], b.submatrices[s]
        name = _pick(algo, a_s, b_s, c_s)
        plans.append((name, a_s, b_s, c_s, make_work(name, a_s, b_s, c_s)))

    def program(ctx):
        _replicate_rank(ctx, other.submatrices[0], copies, members, "ts.replicate")
        multiply_rank(ctx, *plans[c.submatrix_of_rank(ctx.rank)])

    run_spmd(max(members) + 1, program, ledger=ledger, schedule=schedule)
    return c
