"""Cannon multiplication ``C += A @ B`` on a square ``q x q`` grid."""

from collections import defaultdict

from .blocks import BatchItem, block_gemm_acc, order_batches, zeros_block
from .errors import InvalidArgumentError, UnsupportedGridError
from .grid_comm import run_spmd

__all__ = ["multiply_cannon", "cannon_rank", "check_cannon_layout", "multiply_panels"]

SKEW = "cannon.skew"
SHIFT = "cannon.shift"


def multiply_panels(a_blocks, b_blocks, store):
    """Multiply local panels into a :class:`~blocktensor.matrix.LocalCSR`.

    ``a_blocks`` maps ``(i, k)`` and ``b_blocks`` maps ``(k, j)`` to dense
    blocks.  Missing target blocks are created; only pairs that are both
    stored produce work.  Returns the number of block products.
    """
    b_by_k = defaultdict(list)
    for (k, j), blk in b_blocks.items():
        b_by_k[k].append((j, blk))
    items = [
        BatchItem(i, j, k, ablk, bblk)
        for (i, k), ablk in a_blocks.items()
        for j, bblk in b_by_k.get(k, ())
    ]
    for it in order_batches(items):
        target = store.get(it.row, it.col)
        if target is None:
            target = zeros_block(it.a.shape[0], it.b.shape[1])
            store.put(it.row, it.col, target)
        block_gemm_acc(target, it.a, it.b)
    return len(items)


def check_conformal(a, b, c):
    if a.col_blocking != b.row_blocking:
        raise InvalidArgumentError("inner blockings of A and B differ")
    if c.row_blocking != a.row_blocking or c.col_blocking != b.col_blocking:
        raise InvalidArgumentError("C blocking does not match A rows x B columns")
    if not (set(a.ranks) == set(b.ranks) == set(c.ranks)):
        raise InvalidArgumentError("A, B and C must live on the same set of ranks")


def check_cannon_layout(a, b, c):
    """Raise unless Cannon can run on the operands as they are laid out."""
    check_conformal(a, b, c)
    if not a.grid.is_square():
        raise UnsupportedGridError(f"Cannon needs a square grid, got {a.grid.dims}")
    if not (a.grid == b.grid == c.grid and a.ranks == b.ranks == c.ranks):
        raise UnsupportedGridError("A, B and C must share one grid for Cannon")
    if not a.col_dist.same_as(b.row_dist):
        raise InvalidArgumentError("A column distribution and B row distribution differ")
    if not (c.row_dist.same_as(a.row_dist) and c.col_dist.same_as(b.col_dist)):
        raise InvalidArgumentError("C distribution must match A rows x B columns")


def cannon_rank(ctx, a, b, c):
    """Per-rank Cannon body.  Only A and B panels travel; C stays put."""
    if not a.has_rank(ctx.rank):
        return 0
    q = a.grid.dims[0]
    gr, gc = a.grid_coords_of(ctx.rank)

    def at(r, col):
        return a.ranks[a.grid.rank_of((r % q, col % q))]

    a_panel = {(i, k): blk for i, k, blk in a.local(ctx.rank).items()}
    b_panel = {(k, j): blk for k, j, blk in b.local(ctx.rank).items()}

    # initial alignment: row gr of A moves left by gr, column gc of B up by gc
    ctx.send(at(gr, gc - gr), a_panel, phase=SKEW, tag="A")
    ctx.send(at(gr - gc, gc), b_panel, phase=SKEW, tag="B")
    a_panel = ctx.recv(at(gr, gc + gr), tag="A")
    b_panel = ctx.recv(at(gr + gc, gc), tag="B")

    left, right = at(gr, gc - 1), at(gr, gc + 1)
    up, down = at(gr - 1, gc), at(gr + 1, gc)
    store = c.local(ctx.rank)
    products = 0
    for step in range(q):
        more = step < q - 1
        if more:
            # posted before the local work so transfer overlaps compute
            ctx.send(left, a_panel, phase=SHIFT, tag="A")
            ctx.send(up, b_panel, phase=SHIFT, tag="B")
        products += multiply_panels(a_panel, b_panel, store)
        if more:
            a_panel = ctx.recv(right, tag="A")
            b_panel = ctx.recv(down, tag="B")
    return products


def multiply_cannon(a, b, c, *, ledger=None, schedule=None):
    """``C += A @ B`` with Cannon's algorithm; returns ``c``.

    All three matrices must share one square grid, A's column distribution
    must equal B's row distribution and C must be distributed like A's rows
    and B's columns.
    """
    check_cannon_layout(a, b, c)
    size = max(a.ranks) + 1
    run_spmd(size, lambda ctx: cannon_rank(ctx, a, b, c), ledger=ledger, schedule=schedule)
    return c
