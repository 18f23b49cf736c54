"""Communication-avoiding multiplication for rectangular operands.

Both algorithms first move A and B onto a linear grid of the same ranks,
with the contracted dimension K spread over the processes.

``case1`` (K much larger than M and N)
    A arrives transposed, every rank forms the partial product of its
    K-slab, and the partials are summed by a ring reduction whose segments
    are the blocks each rank owns in C.  Only C partials circulate after
    the initial redistribution.
``case2`` (M much larger than K)
    A stays resident: each rank already holds all K-groups of its A rows,
    which acts as a virtual column grid.  B slabs circulate around the ring
    for P steps, and the row-distributed result is sent back to C's layout.
"""

from collections import defaultdict

from .blocks import BatchItem, block_gemm_acc, order_batches, transpose_block, zeros_block
from .cost_model import ALGORITHMS, MultiplySpec, estimate_result_occupancy, predicted_volumes
from .errors import InvalidArgumentError, UnsupportedGridError
from .grid_comm import run_spmd
from .matrix import DistMatrix, FuncDistribution, linear_grid, redistribute_rank, scatter_blocks
from .mult_cannon import cannon_rank, check_cannon_layout, check_conformal, multiply_panels

__all__ = [
    "multiply_reduce_case1",
    "multiply_virtual_case2",
    "select_algorithm",
    "choose_algorithm",
    "multiply",
    "case1_rank",
    "case2_rank",
    "ring_reduce",
    "Case1Work",
    "Case2Work",
]


def slab_of(i, n, nprocs):
    """Contiguous balanced partition of ``n`` block indices over ``nprocs``."""
    return i * nprocs // n


def _on_linear(rows, cols, members):
    """Matrix on a ``P x 1`` grid over ``members`` with contiguous row slabs."""
    p, n = len(members), len(rows)
    return DistMatrix(
        rows,
        cols,
        linear_grid(p),
        FuncDistribution(lambda i: slab_of(i, n, p), n),
        FuncDistribution(lambda j: 0, len(cols)),
        members,
    )


class Case1Work:
    """Linear-grid work matrices for :func:`case1_rank`."""

    def __init__(self, a, b, members):
        self.members = list(members)
        self.at = _on_linear(a.col_blocking, a.row_blocking, self.members)
        self.b = _on_linear(b.row_blocking, b.col_blocking, self.members)


class Case2Work:
    """Linear-grid work matrices for :func:`case2_rank`."""

    def __init__(self, a, b, c, members):
        self.members = list(members)
        self.a = _on_linear(a.row_blocking, a.col_blocking, self.members)
        self.b = _on_linear(b.row_blocking, b.col_blocking, self.members)
        self.c = _on_linear(c.row_blocking, c.col_blocking, self.members)
        self.kgroup = self.b.row_dist.coord


def _transposed(i, j, blk):
    return j, i, transpose_block(blk)


def ring_reduce(ctx, members, partial, owner, *, phase):
    """Sum ``{(i, j): block}`` partials over ``members`` in a ``P``-step ring.

    Segment ``s`` collects the keys whose ``owner`` is ``members[s]``.  At
    step ``t`` rank ``p`` adds its share of segment ``p - t`` and passes it
    on, so each segment visits every rank once and ends fully reduced on
    its owner.  Returns the reduced segment owned by the calling rank.
    """
    nprocs = len(members)
    p = members.index(ctx.rank)
    position = {r: s for s, r in enumerate(members)}
    segments = defaultdict(dict)
    for key, blk in partial.items():
        segments[position[owner(*key)]][key] = blk
    nxt, prv = members[(p + 1) % nprocs], members[(p - 1) % nprocs]
    acc = {}
    for t in range(nprocs):
        if t:
            acc = ctx.recv(prv, tag="reduce")
        for key, blk in segments.get((p - t) % nprocs, {}).items():
            if key in acc:
                acc[key] += blk
            else:
                acc[key] = blk
        ctx.send(nxt, acc, phase=phase, tag="reduce")
    return ctx.recv(prv, tag="reduce")


def case1_rank(ctx, a, b, c, work, *, phase="case1"):
    """Per-rank body of :func:`multiply_reduce_case1`."""
    members = work.members
    if ctx.rank not in members:
        return
    # 2D -> 1D, K distributed; A is transposed in flight
    redistribute_rank(ctx, a, work.at, phase=f"{phase}.redistribute", transform=_transposed)
    redistribute_rank(ctx, b, work.b, phase=f"{phase}.redistribute")

    # partial product of the local K-slab
    at_store, b_store = work.at.local(ctx.rank), work.b.local(ctx.rank)
    items = []
    for k, i, atblk in at_store.items():
        ablk = transpose_block(atblk)
        for j, bblk in b_store.row(k):
            items.append(BatchItem(i, j, k, ablk, bblk))
    partial = {}
    for it in order_batches(items):
        target = partial.get((it.row, it.col))
        if target is None:
            target = partial[(it.row, it.col)] = zeros_block(it.a.shape[0], it.b.shape[1])
        block_gemm_acc(target, it.a, it.b)

    reduced = ring_reduce(ctx, members, partial, c.owner, phase=f"{phase}.reduce")

    # the reduced segment is already on the rank that owns it in C's 2D layout
    store = c.local(ctx.rank)
    for (i, j), blk in reduced.items():
        store.put(i, j, blk, accumulate=store.get(i, j) is not None)


def case2_rank(ctx, a, b, c, work, *, phase="case2"):
    """Per-rank body of :func:`multiply_virtual_case2`."""
    members = work.members
    if ctx.rank not in members:
        return
    nprocs = len(members)
    p = members.index(ctx.rank)

    redistribute_rank(ctx, a, work.a, phase=f"{phase}.redistribute")
    redistribute_rank(ctx, b, work.b, phase=f"{phase}.redistribute")

    a_store, c_store = work.a.local(ctx.rank), work.c.local(ctx.rank)
    a_by_group = defaultdict(dict)
    for i, k, blk in a_store.items():
        a_by_group[work.kgroup(k)][(i, k)] = blk
    slab = {(k, j): blk for k, j, blk in work.b.local(ctx.rank).items()}
    left, right = members[(p - 1) % nprocs], members[(p + 1) % nprocs]
    for step in range(nprocs):
        group = (p + step) % nprocs
        # post the shift first; after P shifts every slab is back home
        ctx.send(left, slab, phase=f"{phase}.shift", tag="B")
        multiply_panels(a_by_group.get(group, {}), slab, c_store)
        slab = ctx.recv(right, tag="B")

    # 1D -> 2D and accumulate into C
    scatter_blocks(
        ctx,
        sorted(set(members) | set(c.ranks)),
        list(c_store.items()),
        c,
        phase=f"{phase}.redistribute",
        accumulate=True,
    )


def _members(a, b, c):
    check_conformal(a, b, c)
    return sorted(a.ranks)


def multiply_reduce_case1(a, b, c, *, ledger=None, schedule=None):
    """``C += A @ B`` by K-slab partial products and a ring reduction."""
    members = _members(a, b, c)
    work = Case1Work(a, b, members)
    run_spmd(max(members) + 1, lambda ctx: case1_rank(ctx, a, b, c, work), ledger=ledger, schedule=schedule)
    return c


def multiply_virtual_case2(a, b, c, *, ledger=None, schedule=None):
    """``C += A @ B`` with resident A and circulating B slabs."""
    members = _members(a, b, c)
    work = Case2Work(a, b, c, members)
    run_spmd(max(members) + 1, lambda ctx: case2_rank(ctx, a, b, c, work), ledger=ledger, schedule=schedule)
    return c


def select_algorithm(M, N, K, O_A, O_B, O_C_est, P, allowed=ALGORITHMS):
    """Algorithm with the smallest predicted per-process volume.

    Ties go to the earlier entry of ``("cannon", "case1", "case2")``.
    """
    volumes = predicted_volumes(MultiplySpec(M, N, K, O_A, O_B, O_C_est, P))
    best = None
    for name in ALGORITHMS:
        if name in allowed and (best is None or volumes[name] < volumes[best]):
            best = name
    if best is None:
        raise InvalidArgumentError(f"no algorithm among {allowed}")
    return best


def cannon_feasible(a, b, c):
    try:
        check_cannon_layout(a, b, c)
    except (UnsupportedGridError, InvalidArgumentError):
        return False
    return True


def measured_spec(a, b, c=None, o_c=None, nprocs=None):
    """:class:`MultiplySpec` built from stored element counts.

    Without ``o_c`` the result occupancy is estimated from the operands.
    """
    m, k = a.shape
    _, n = b.shape
    spec = MultiplySpec(m, n, k, a.occupancy(), b.occupancy(), 0.0, nprocs or len(a.ranks))
    if o_c is None:
        o_c = estimate_result_occupancy(spec, a.nblkcols)
    return spec.with_occupancy_c(o_c)


def choose_algorithm(a, b, c, o_c=None):
    """Pick the cheapest algorithm that can run on the given layouts."""
    spec = measured_spec(a, b, c, o_c)
    allowed = ALGORITHMS if cannon_feasible(a, b, c) else ("case1", "case2")
    return select_algorithm(spec.M, spec.N, spec.K, spec.O_A, spec.O_B, spec.O_C, spec.P, allowed)


def multiply_rank(ctx, algo, a, b, c, work=None):
    """Run one algorithm's per-rank body (work matrices come from
    :func:`make_work`)."""
    if algo == "cannon":
        return cannon_rank(ctx, a, b, c)
    if algo == "case1":
        return case1_rank(ctx, a, b, c, work)
    if algo == "case2":
        return case2_rank(ctx, a, b, c, work)
    raise InvalidArgumentError(f"unknown algorithm {algo!r}")


def make_work(algo, a, b, c):
    members = sorted(a.ranks)
    if algo == "case1":
        return Case1Work(a, b, members)
    if algo == "case2":
        return Case2Work(a, b, c, members)
    return None


def multiply(a, b, c, algo="auto", *, ledger=None, schedule=None):
    """``C += A @ B`` with a named algorithm or ``"auto"``.

    Returns ``(c, algo)`` where ``algo`` is the algorithm that ran.
    """
    check_conformal(a, b, c)
    if algo == "auto":
        algo = choose_algorithm(a, b, c)
    if algo == "cannon":
        check_cannon_layout(a, b, c)
    work = make_work(algo, a, b, c)
    run_spmd(
        max(a.ranks) + 1,
        lambda ctx: multiply_rank(ctx, algo, a, b, c, work),
        ledger=ledger,
        schedule=schedule,
    )
    return c, algo
