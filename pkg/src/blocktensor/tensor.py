"""Block-sparse tensors of rank 2 to 4 and contraction by matricization.

A tensor declares which of its dimensions form matrix rows and which form
matrix columns.  Each group is linearised with a mixed-radix code in which
the later-listed dimension varies fastest, both for block coordinates and
for the elements inside a block.  The resulting matrix is stored as a
:class:`~blocktensor.tall_skinny.TallSkinnyMatrix` whose index data is
computed from the per-dimension blockings on demand.

Tensor block ``b`` belongs to tensor-grid coordinate ``b[d] mod g[d]``.
The matrix grid has ``prod(g[row dims])`` rows and ``prod(g[col dims])``
columns, linearised like the block coordinates, so an unsplit backing
matrix keeps every block on the rank the tensor grid assigns it.
"""

from dataclasses import dataclass
from math import prod

import numpy as np

from .blocks import Blocking
from .errors import InvalidArgumentError, LayoutError
from .grid_comm import ProcessGrid, balanced_dims, personalized_exchange, run_spmd
from .tall_skinny import IndexFuncs, TallSkinnyMatrix, choose_split_factor, multiply_tall_skinny

__all__ = [
    "SparseTensor",
    "ContractionSpec",
    "create_tensor",
    "tensor_to_matrix_index",
    "matrix_to_tensor_index",
    "contract",
    "MIN_RANK",
    "MAX_RANK",
]

MIN_RANK, MAX_RANK = 2, 4
REMAP = "tensor.remap"


def _ravel(coords, radices):
    return int(np.ravel_multi_index(tuple(coords), tuple(radices))) if radices else 0


def _unravel(index, radices):
    return tuple(int(v) for v in np.unravel_index(index, tuple(radices))) if radices else ()


def group_funcs(blockings, grid_dims):
    """:class:`IndexFuncs` of a matricized dimension group.

    ``blockings`` and ``grid_dims`` list the group's tensor dimensions in
    order.  Sizes, offsets and grid coordinates are derived from the block
    coordinates without building arrays over the group.
    """
    radices = [len(b) for b in blockings]
    totals = [b.total for b in blockings]

    def size(index):
        return prod(b.size(c) for b, c in zip(blockings, _unravel(index, radices)))

    def offset(index):
        coords = _unravel(index, radices)
        total, lead = 0, 1
        for t, (b, c) in enumerate(zip(blockings, coords)):
            total += lead * b.offset(c) * prod(totals[t + 1 :])
            lead *= b.size(c)
        return total

    def dist(index):
        coords = _unravel(index, radices)
        return _ravel([c % g for c, g in zip(coords, grid_dims)], grid_dims)

    return IndexFuncs(size, dist, prod(radices), offset)


class SparseTensor:
    """A block-sparse tensor backed by a tall-and-skinny matrix.

    Parameters
    ----------
    blockings : sequence
        Block sizes per dimension (lists or :class:`Blocking`).
    grid : ProcessGrid or sequence of int, optional
        Tensor process grid with one dimension per tensor dimension.
        Defaults to the most balanced factorization of ``nprocs``.
    row_dims, col_dims : sequence of int
        Matricization map.  ``col_dims`` defaults to the remaining
        dimensions in increasing order.
    nprocs : int, optional
        Process count used when ``grid`` is not given.
    split_factor : int, optional
        Split factor of the backing matrix; chosen with
        :func:`~blocktensor.tall_skinny.choose_split_factor` by default.
    """

    def __init__(self, blockings, grid=None, row_dims=(0,), col_dims=None, nprocs=None, split_factor=None):
        self.blockings = [b if isinstance(b, Blocking) else Blocking(b) for b in blockings]
        n = len(self.blockings)
        if not MIN_RANK <= n <= MAX_RANK:
            raise InvalidArgumentError(f"tensor rank must lie in [{MIN_RANK}, {MAX_RANK}], got {n}")
        if grid is None:
            grid = balanced_dims(nprocs or 1, n)
        if not isinstance(grid, ProcessGrid):
            grid = ProcessGrid(tuple(grid))
        if grid.ndim != n:
            raise InvalidArgumentError(f"grid rank {grid.ndim} differs from tensor rank {n}")
        row_dims = tuple(int(d) for d in row_dims)
        if col_dims is None:
            col_dims = tuple(d for d in range(n) if d not in row_dims)
        col_dims = tuple(int(d) for d in col_dims)
        if not row_dims or not col_dims or sorted(row_dims + col_dims) != list(range(n)):
            raise InvalidArgumentError(
                f"map {row_dims} | {col_dims} is not a partition of dimensions 0..{n - 1}"
            )
        self.grid = grid
        self.row_dims, self.col_dims = row_dims, col_dims

        gdims = grid.dims
        rows = group_funcs([self.blockings[d] for d in row_dims], [gdims[d] for d in row_dims])
        cols = group_funcs([self.blockings[d] for d in col_dims], [gdims[d] for d in col_dims])
        mgrid = ProcessGrid((prod(gdims[d] for d in row_dims), prod(gdims[d] for d in col_dims)))
        ranks = []
        for pos in range(mgrid.size):
            gr, gc = mgrid.coords_of(pos)
            coords = [0] * n
            for d, c in zip(row_dims, _unravel(gr, [gdims[d] for d in row_dims])):
                coords[d] = c
            for d, c in zip(col_dims, _unravel(gc, [gdims[d] for d in col_dims])):
                coords[d] = c
            ranks.append(grid.rank_of(coords))
        split_dim = 0 if rows.total >= cols.total else 1
        if split_factor is None:
            long_, short = max(rows.total, cols.total), min(rows.total, cols.total)
            split_factor = choose_split_factor(max(long_, 1), max(short, 1), max(mgrid.dims))
        self.matrix = TallSkinnyMatrix(rows, cols, mgrid, split_dim, split_factor, ranks=ranks)

    # -- shape --

    @property
    def rank(self):
        return len(self.blockings)

    @property
    def shape(self):
        return tuple(b.total for b in self.blockings)

    @property
    def nblocks(self):
        return tuple(len(b) for b in self.blockings)

    def block_shape(self, coords):
        return tuple(b.size(c) for b, c in zip(self.blockings, coords))

    # -- index mapping --

    def _check_coords(self, coords):
        coords = tuple(int(c) for c in coords)
        if len(coords) != self.rank or not all(0 <= c < n for c, n in zip(coords, self.nblocks)):
            raise InvalidArgumentError(f"block coordinates {coords} outside {self.nblocks}")
        return coords

    def to_matrix_index(self, coords):
        coords = self._check_coords(coords)
        nb = self.nblocks
        return (
            _ravel([coords[d] for d in self.row_dims], [nb[d] for d in self.row_dims]),
            _ravel([coords[d] for d in self.col_dims], [nb[d] for d in self.col_dims]),
        )

    def to_tensor_index(self, i, j):
        nb = self.nblocks
        ri, rj = self.matrix.nblocks
        if not (0 <= i < ri and 0 <= j < rj):
            raise InvalidArgumentError(f"matrix block ({i}, {j}) outside {ri}x{rj}")
        coords = [0] * self.rank
        for d, c in zip(self.row_dims, _unravel(i, [nb[d] for d in self.row_dims])):
            coords[d] = c
        for d, c in zip(self.col_dims, _unravel(j, [nb[d] for d in self.col_dims])):
            coords[d] = c
        return tuple(coords)

    def owner(self, coords):
        return self.matrix.owner(*self.to_matrix_index(coords))

    # -- block access --

    def _to_matrix_block(self, block):
        order = self.row_dims + self.col_dims
        r = prod(block.shape[d] for d in self.row_dims)
        return np.ascontiguousarray(block.transpose(order)).reshape(r, -1)

    def _from_matrix_block(self, coords, mblk):
        shape = self.block_shape(coords)
        order = self.row_dims + self.col_dims
        grouped = mblk.reshape([shape[d] for d in order])
        return grouped.transpose(np.argsort(order))

    def put_block(self, coords, block, accumulate=False):
        coords = self._check_coords(coords)
        block = np.asarray(block, dtype=np.float64)
        if block.shape != self.block_shape(coords):
            raise InvalidArgumentError(
                f"block {coords} must have shape {self.block_shape(coords)}, got {block.shape}"
            )
        i, j = self.to_matrix_index(coords)
        self.matrix.put_block(i, j, self._to_matrix_block(block), accumulate=accumulate)

    def get_block(self, coords):
        i, j = self.to_matrix_index(coords)
        mblk = self.matrix.get_block(i, j)
        if mblk is None:
            return None
        return self._from_matrix_block(self.to_tensor_index(i, j), mblk).copy()

    def iter_blocks(self):
        """``(coords, block)`` pairs in block-coordinate order."""
        items = []
        for i, j, mblk in self.matrix.iter_blocks():
            coords = self.to_tensor_index(i, j)
            items.append((coords, self._from_matrix_block(coords, mblk)))
        items.sort(key=lambda t: t[0])
        return iter(items)

    def local_blocks(self, rank):
        """``(coords, block)`` pairs stored on ``rank``."""
        s = self.matrix.submatrix_of_rank(rank)
        for li, lj, mblk in self.matrix.local(rank).items():
            coords = self.to_tensor_index(*self.matrix.to_global(s, li, lj))
            yield coords, self._from_matrix_block(coords, mblk)

    def stored_elements(self):
        return self.matrix.stored_elements()

    def occupancy(self):
        return self.matrix.occupancy()

    def to_dense(self):
        out = np.zeros(self.shape)
        for coords, blk in self.iter_blocks():
            sl = tuple(slice(b.offset(c), b.offset(c) + b.size(c)) for b, c in zip(self.blockings, coords))
            out[sl] = blk
        return out

    def empty_like(self, row_dims=None, col_dims=None, split_factor=None):
        """Empty tensor with the same blockings and grid (optionally another map)."""
        if row_dims is None:
            row_dims, col_dims = self.row_dims, self.col_dims
        if split_factor is None:
            split_factor = self.matrix.factor
        return SparseTensor(self.blockings, self.grid, row_dims, col_dims, split_factor=split_factor)

    def __repr__(self):
        return (
            f"SparseTensor(shape={self.shape}, blocks={self.nblocks}, grid={self.grid.dims}, "
            f"map={self.row_dims}|{self.col_dims})"
        )


def create_tensor(blockings, grid_dims=None, row_dims=(0,), col_dims=None, nprocs=None, split_factor=None):
    return SparseTensor(blockings, grid_dims, row_dims, col_dims, nprocs, split_factor)


def tensor_to_matrix_index(t, block_coords):
    return t.to_matrix_index(block_coords)


def matrix_to_tensor_index(t, i, j):
    return t.to_tensor_index(i, j)


def from_dense(dense, blockings, grid=None, row_dims=(0,), col_dims=None, mask=None, split_factor=None):
    """Cut a dense array into tensor blocks (all-zero blocks skipped unless
    ``mask`` selects them)."""
    t = SparseTensor(blockings, grid, row_dims, col_dims, split_factor=split_factor)
    dense = np.asarray(dense, dtype=np.float64)
    if dense.shape != t.shape:
        raise InvalidArgumentError(f"dense shape {dense.shape} does not match blocking {t.shape}")
    for coords in np.ndindex(*t.nblocks):
        sl = tuple(slice(b.offset(c), b.offset(c) + b.size(c)) for b, c in zip(t.blockings, coords))
        blk = dense[sl]
        if (mask[coords] if mask is not None else np.any(blk)):
            t.put_block(coords, blk)
    return t


def random_tensor(blockings, grid, occupancy, rng, row_dims=(0,), col_dims=None, split_factor=None):
    """Blocks present independently with probability ``occupancy``; values N(0, 1)."""
    t = SparseTensor(blockings, grid, row_dims, col_dims, split_factor=split_factor)
    for coords in np.ndindex(*t.nblocks):
        if rng.random() < occupancy:
            t.put_block(coords, rng.standard_normal(t.block_shape(coords)))
    return t


# ---------------------------------------------------------------------------
# contraction


@dataclass(frozen=True)
class ContractionSpec:
    """Which dimensions are summed, and the order of C's dimensions.

    ``contract_a[t]`` of A is summed against ``contract_b[t]`` of B.  The
    free dimensions of A (increasing order) followed by those of B form the
    natural output order; ``out`` permutes it (``out[c]`` is the position in
    that natural order of C's dimension ``c``).
    """

    contract_a: tuple
    contract_b: tuple
    out: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "contract_a", tuple(int(d) for d in self.contract_a))
        object.__setattr__(self, "contract_b", tuple(int(d) for d in self.contract_b))
        if self.out is not None:
            object.__setattr__(self, "out", tuple(int(d) for d in self.out))
        if len(self.contract_a) != len(self.contract_b) or not self.contract_a:
            raise InvalidArgumentError("contracted index lists must be non-empty and of equal length")
        for name, dims in (("A", self.contract_a), ("B", self.contract_b)):
            if len(set(dims)) != len(dims):
                raise InvalidArgumentError(f"contracted dimensions of {name} repeat: {dims}")

    def free(self, rank_a, rank_b):
        """Free dimensions of A and of B, each in increasing order."""
        fa = tuple(d for d in range(rank_a) if d not in self.contract_a)
        fb = tuple(d for d in range(rank_b) if d not in self.contract_b)
        return fa, fb

    def output_sources(self, rank_a, rank_b):
        """For each C dimension, ``("a", d)`` or ``("b", d)``."""
        fa, fb = self.free(rank_a, rank_b)
        natural = [("a", d) for d in fa] + [("b", d) for d in fb]
        order = self.out if self.out is not None else tuple(range(len(natural)))
        if sorted(order) != list(range(len(natural))):
            raise InvalidArgumentError(f"output order {order} is not a permutation of {len(natural)} dims")
        return [natural[p] for p in order]


def _validate(a, b, spec, c):
    for name, t, dims in (("A", a, spec.contract_a), ("B", b, spec.contract_b)):
        if any(not 0 <= d < t.rank for d in dims):
            raise InvalidArgumentError(f"contracted dimensions {dims} out of range for {name}")
    for da, db in zip(spec.contract_a, spec.contract_b):
        if a.blockings[da] != b.blockings[db]:
            raise InvalidArgumentError(f"blockings of A dim {da} and B dim {db} differ")
    sources = spec.output_sources(a.rank, b.rank)
    if len(sources) != c.rank:
        raise InvalidArgumentError(f"C has rank {c.rank}, contraction produces {len(sources)}")
    for cd, (which, d) in enumerate(sources):
        src = a if which == "a" else b
        if src.blockings[d] != c.blockings[cd]:
            raise InvalidArgumentError(f"C dim {cd} blocking differs from {which.upper()} dim {d}")
    if not (a.grid.size == b.grid.size == c.grid.size):
        raise InvalidArgumentError("A, B and C must use the same number of ranks")
    return sources


def _aligned(a, b, spec, c, sources):
    """True when the matricizations already form ``C = A @ B``."""
    c_rows = tuple(cd for cd, (w, _) in enumerate(sources) if w == "a")
    c_cols = tuple(cd for cd, (w, _) in enumerate(sources) if w == "b")
    return (
        a.col_dims == spec.contract_a
        and b.row_dims == spec.contract_b
        and c.row_dims == c_rows
        and c.col_dims == c_cols
        and tuple(sources[cd][1] for cd in c_rows) == a.row_dims
        and tuple(sources[cd][1] for cd in c_cols) == b.col_dims
    )


def _remap_rank(ctx, members, src, dst, key_of, accumulate):
    """Send every block of ``src`` held by this rank to its owner in ``dst``."""
    outgoing = {}
    for coords, blk in src.local_blocks(ctx.rank):
        i, j, mblk = key_of(coords, blk)
        outgoing.setdefault(dst.owner(i, j), {})[(i, j)] = mblk
    for payload in personalized_exchange(ctx, members, outgoing, phase=REMAP):
        for (i, j), mblk in (payload or {}).items():
            dst.put_block(i, j, mblk, accumulate=accumulate)


def contract(a, b, spec, c, algo="auto", *, ledger=None, schedule=None):
    """``C += contraction of A and B`` according to ``spec``.

    When the matricization maps of A, B and C already express the
    contraction as ``C = A @ B`` on matching layouts, the backing matrices
    are multiplied directly.  Otherwise A and B are remapped to temporary
    matrices (phase ``"tensor.remap"``), multiplied, and the result is
    remapped and added into C.  Returns ``c``.
    """
    sources = _validate(a, b, spec, c)
    if _aligned(a, b, spec, c, sources):
        try:
            multiply_tall_skinny(a.matrix, b.matrix, c.matrix, algo, ledger=ledger, schedule=schedule)
            return c
        except LayoutError:
            pass
    return _contract_remapped(a, b, spec, c, sources, algo, ledger, schedule)


def _contract_remapped(a, b, spec, c, sources, algo, ledger, schedule):
    fa, fb = spec.free(a.rank, b.rank)
    nprocs = a.grid.size
    members = list(range(nprocs))
    one = lambda n: [1] * n  # noqa: E731

    m_funcs = group_funcs([a.blockings[d] for d in fa], one(len(fa)))
    k_funcs = group_funcs([a.blockings[d] for d in spec.contract_a], one(len(spec.contract_a)))
    n_funcs = group_funcs([b.blockings[d] for d in fb], one(len(fb)))
    # round-robin over the work grid
    rr = lambda f: IndexFuncs(f.block_size_fn, lambda i: i, f.n_blocks, f.offset_fn)  # noqa: E731
    m_funcs, k_funcs, n_funcs = rr(m_funcs), rr(k_funcs), rr(n_funcs)

    grid = ProcessGrid(balanced_dims(nprocs, 2))
    extent = max(grid.dims)
    sizes = {"M": m_funcs.total, "N": n_funcs.total, "K": k_funcs.total}
    longest = max(sizes, key=lambda k: (sizes[k], "KMN".index(k)))
    rest = max(v for k, v in sizes.items() if k != longest)
    f = choose_split_factor(sizes[longest], max(rest, 1), extent)
    # (split_dim, factor) of the work matrices A (M x K), B (K x N), C (M x N)
    layout = {
        "M": ((0, f), (0, 1), (0, f)),
        "K": ((1, f), (0, f), (0, 1)),
        "N": ((0, 1), (1, f), (1, f)),
    }[longest]
    aw = TallSkinnyMatrix(m_funcs, k_funcs, grid, *layout[0])
    bw = TallSkinnyMatrix(k_funcs, n_funcs, grid, *layout[1])
    cw = TallSkinnyMatrix(m_funcs, n_funcs, grid, *layout[2])

    nb = lambda t, dims: [t.nblocks[d] for d in dims]  # noqa: E731

    def a_key(coords, blk):
        i = _ravel([coords[d] for d in fa], nb(a, fa))
        k = _ravel([coords[d] for d in spec.contract_a], nb(a, spec.contract_a))
        order = fa + spec.contract_a
        r = prod(blk.shape[d] for d in fa)
        return i, k, np.ascontiguousarray(blk.transpose(order)).reshape(r, -1)

    def b_key(coords, blk):
        k = _ravel([coords[d] for d in spec.contract_b], nb(b, spec.contract_b))
        j = _ravel([coords[d] for d in fb], nb(b, fb))
        order = spec.contract_b + fb
        r = prod(blk.shape[d] for d in spec.contract_b)
        return k, j, np.ascontiguousarray(blk.transpose(order)).reshape(r, -1)

    def move_in(ctx):
        _remap_rank(ctx, members, a, aw, a_key, False)
        _remap_rank(ctx, members, b, bw, b_key, False)

    run_spmd(nprocs, move_in, ledger=ledger, schedule=schedule)
    multiply_tall_skinny(aw, bw, cw, algo, ledger=ledger, schedule=schedule)

    # C dims in the natural (free A, free B) order, then permuted to C's order
    natural = [("a", d) for d in fa] + [("b", d) for d in fb]
    perm = [natural.index(src) for src in sources]
    c_shape_nat = lambda i, j: [  # noqa: E731
        (a if w == "a" else b).blockings[d].size(cc)
        for (w, d), cc in zip(natural, _unravel(i, nb(a, fa)) + _unravel(j, nb(b, fb)))
    ]

    def move_out(ctx):
        outgoing = {}
        s = cw.submatrix_of_rank(ctx.rank)
        for li, lj, mblk in cw.local(ctx.rank).items():
            i, j = cw.to_global(s, li, lj)
            nat = _unravel(i, nb(a, fa)) + _unravel(j, nb(b, fb))
            coords = tuple(nat[p] for p in perm)
            blk = mblk.reshape(c_shape_nat(i, j)).transpose(perm)
            outgoing.setdefault(c.owner(coords), {})[coords] = blk
        for payload in personalized_exchange(ctx, members, outgoing, phase=REMAP):
            for coords, blk in (payload or {}).items():
                c.put_block(coords, blk, accumulate=True)

    run_spmd(nprocs, move_out, ledger=ledger, schedule=schedule)
    return c
