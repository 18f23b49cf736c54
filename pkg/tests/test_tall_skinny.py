import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blocktensor.errors import InvalidArgumentError, LayoutError
from blocktensor.grid_comm import Ledger, ProcessGrid
from blocktensor.matrix import DistMatrix, random_matrix, to_dense
from blocktensor.mult_rect import multiply
from blocktensor.tall_skinny import (
    IndexFuncs,
    TallSkinnyMatrix,
    choose_split_factor,
    create_tall_skinny,
    multiply_tall_skinny,
    random_tall_skinny,
)

from conftest import naive_matmul, random_sizes, rel_err


def _ranges(m):
    return [m.block_range(s) for s in range(m.factor)]


def test_index_funcs_from_sizes():
    f = IndexFuncs.from_sizes([2, 3, 1])
    assert [f.size(i) for i in range(3)] == [2, 3, 1]
    assert [f.offset(i) for i in range(4)] == [0, 2, 5, 6]
    assert f.total == 6
    assert f.matches(IndexFuncs(lambda i: [2, 3, 1][i], lambda i: 0, 3))
    assert not f.matches(IndexFuncs.uniform(3, 2))


def test_index_funcs_without_offsets():
    f = IndexFuncs(lambda i: 1 + i % 3, lambda i: i, 7)
    assert f.offset(5) == 1 + 2 + 3 + 1 + 2
    assert f.blocking(2, 3).sizes.tolist() == [3, 1, 2]


def test_single_submatrix_is_plain_matrix():
    g = ProcessGrid((2, 2))
    m = create_tall_skinny(IndexFuncs.uniform(6, 2), IndexFuncs.uniform(4, 3), g, 0, 1)
    assert len(m.submatrices) == 1
    sub = m.submatrices[0]
    plain = DistMatrix([2] * 6, [3] * 4, g)
    assert sub.ranks == plain.ranks
    assert all(sub.owner(i, j) == plain.owner(i, j) for i in range(6) for j in range(4))


def test_even_partition():
    m = create_tall_skinny(IndexFuncs.uniform(12, 1), IndexFuncs.uniform(2, 1), ProcessGrid((3, 1)), 0, 3)
    assert _ranges(m) == [(0, 4), (4, 4), (8, 4)]


def test_ceiling_partition():
    m = create_tall_skinny(IndexFuncs.uniform(10, 1), IndexFuncs.uniform(2, 1), ProcessGrid((3, 1)), 0, 3)
    assert _ranges(m) == [(0, 4), (4, 4), (8, 2)]


def test_invalid_factor():
    with pytest.raises(InvalidArgumentError):
        create_tall_skinny(IndexFuncs.uniform(10, 1), IndexFuncs.uniform(2, 1), ProcessGrid((2, 2)), 0, 3)
    with pytest.raises(InvalidArgumentError):
        create_tall_skinny(IndexFuncs.uniform(10, 1), IndexFuncs.uniform(2, 1), ProcessGrid((2, 2)), 0, 0)


@settings(max_examples=100)
@given(st.integers(0, 200), st.integers(1, 6), st.integers(1, 30), st.sampled_from([0, 1]))
def test_index_bijection(n, f, other, split_dim):
    g = ProcessGrid((6, 1))
    long_, short = IndexFuncs.uniform(n, 1), IndexFuncs.uniform(other, 1)
    rows, cols = (long_, short) if split_dim == 0 else (short, long_)
    m = TallSkinnyMatrix(rows, cols, g, split_dim, f)
    seen = set()
    for i in range(rows.n_blocks):
        for j in range(min(cols.n_blocks, 3)):
            s, li, lj = m.to_local(i, j)
            assert m.to_global(s, li, lj) == (i, j)
            seen.add((s, li, lj))
    assert len(seen) == rows.n_blocks * min(cols.n_blocks, 3)
    counts = [c for _, c in _ranges(m)]
    assert sum(counts) == n


def test_out_of_range():
    m = create_tall_skinny(IndexFuncs.uniform(4, 1), IndexFuncs.uniform(2, 1), ProcessGrid((2, 1)), 0, 2)
    with pytest.raises(InvalidArgumentError):
        m.to_local(4, 0)


def test_blocks_stored_once(rng):
    g = ProcessGrid((4, 2))
    m = random_tall_skinny(IndexFuncs.from_sizes(random_sizes(rng, 90)), IndexFuncs.uniform(3, 2), g, 0, 4, 0.5, rng)
    keys = [(i, j) for i, j, _ in m.iter_blocks()]
    assert len(keys) == len(set(keys))
    for i, j, blk in m.iter_blocks():
        assert np.array_equal(m.get_block(i, j), blk)
        assert m.local(m.owner(i, j)) is m.submatrices[m.to_local(i, j)[0]].local(m.owner(i, j))
    m.check()


def test_index_storage_follows_local_blocks(rng):
    g = ProcessGrid((4, 2))
    n = 2000
    m = create_tall_skinny(IndexFuncs.uniform(n, 1), IndexFuncs.uniform(2, 1), g, 0, 4)
    for i in range(0, n, 7):
        m.put_block(i, i % 2, np.ones((1, 1)))
    for rank in range(8):
        owned = m.local(rank).nblocks
        assert m.index_storage(rank, 0) <= owned


# -- split factor --


def test_split_factor_examples():
    assert choose_split_factor(50, 50, 8) == 1
    assert choose_split_factor(100, 1, 10) == 10
    assert choose_split_factor(400, 100, 16) == 4
    assert choose_split_factor(4, 3, 4) == 1  # |4-3| == |2-3| ties to the smaller
    with pytest.raises(InvalidArgumentError):
        choose_split_factor(0, 1, 4)


@settings(max_examples=200)
@given(st.integers(1, 10**6), st.integers(1, 10**6), st.integers(1, 64))
def test_split_factor_is_argmin(long_, short, p):
    f = choose_split_factor(long_, short, p)
    assert 1 <= f <= p
    best = abs(long_ / f - short)
    assert all(abs(long_ / g - short) >= best for g in range(1, p + 1))


# -- multiplication --


def _oracle(a, b, c0):
    return c0 + a.to_dense() @ b.to_dense()


def test_f1_matches_plain_multiply(rng):
    g = ProcessGrid((2, 2))
    ms, ks, ns = random_sizes(rng, 20), random_sizes(rng, 30), random_sizes(rng, 10)
    pa = random_matrix(ms, ks, g, 0.5, rng)
    pb = random_matrix(ks, ns, g, 0.5, rng)
    fm, fk, fn = (IndexFuncs.from_sizes(s) for s in (ms, ks, ns))
    ta, tb = TallSkinnyMatrix(fm, fk, g), TallSkinnyMatrix(fk, fn, g)
    for i, j, blk in pa.iter_blocks():
        ta.put_block(i, j, blk)
    for i, j, blk in pb.iter_blocks():
        tb.put_block(i, j, blk)
    for algo in ("cannon", "case1", "case2"):
        l1, l2 = Ledger(4), Ledger(4)
        pc = multiply(pa, pb, DistMatrix(ms, ns, g), algo, ledger=l1)[0]
        tc = multiply_tall_skinny(ta, tb, TallSkinnyMatrix(fm, fn, g), algo, ledger=l2)
        assert np.array_equal(tc.to_dense(), to_dense(pc))
        assert l1.snapshot() == l2.snapshot()


def test_split_k_8x128(rng):
    g = ProcessGrid((4, 1))
    fm, fk, fn = IndexFuncs.uniform(4, 2), IndexFuncs.uniform(32, 4), IndexFuncs.uniform(4, 2)
    a = random_tall_skinny(fm, fk, g, 1, 4, 1.0, rng)
    b = random_tall_skinny(fk, fn, g, 0, 4, 1.0, rng)
    c = TallSkinnyMatrix(fm, fn, g)
    ledger = Ledger(4)
    multiply_tall_skinny(a, b, c, ledger=ledger)
    assert rel_err(c.to_dense(), naive_matmul(a.to_dense(), b.to_dense())) <= 1e-12
    # every partial of the dense 8x8 result passes each rank once
    assert ledger.sent("ts.reduce").tolist() == [64] * 4


@pytest.mark.parametrize(
    "layout",
    [
        # (A split, B split, C split) as (split_dim, factor)
        ((1, 2), (0, 2), (0, 1)),
        ((0, 2), (0, 1), (0, 2)),
        ((0, 1), (1, 2), (1, 2)),
        ((0, 1), (0, 1), (0, 1)),
    ],
)
@pytest.mark.parametrize("dims", [(2, 2), (4, 2), (2, 3)])
def test_supported_layouts(rng, layout, dims):
    g = ProcessGrid(dims)
    fm, fk, fn = (IndexFuncs.from_sizes(random_sizes(rng, n)) for n in (30, 40, 20))
    (sa, fa), (sb, fb), (sc, fc) = layout
    a = random_tall_skinny(fm, fk, g, sa, fa, 0.5, rng)
    b = random_tall_skinny(fk, fn, g, sb, fb, 0.5, rng)
    c = random_tall_skinny(fm, fn, g, sc, fc, 0.3, rng)
    want = _oracle(a, b, c.to_dense())
    multiply_tall_skinny(a, b, c)
    c.check()
    assert rel_err(c.to_dense(), want) <= 1e-12


def test_ragged_split_with_empty_piece(rng):
    g = ProcessGrid((4, 1))
    fm, fk, fn = IndexFuncs.uniform(2, 3), IndexFuncs.uniform(5, 2), IndexFuncs.uniform(2, 3)
    # 5 blocks over 4 subgroups: chunk 2, the last piece is empty
    a = random_tall_skinny(fm, fk, g, 1, 4, 1.0, rng)
    b = random_tall_skinny(fk, fn, g, 0, 4, 1.0, rng)
    c = TallSkinnyMatrix(fm, fn, g)
    assert a.block_range(3) == (5, 0)
    multiply_tall_skinny(a, b, c)
    assert rel_err(c.to_dense(), a.to_dense() @ b.to_dense()) <= 1e-12


def test_layout_errors_name_dimension(rng):
    g = ProcessGrid((4, 1))
    fm, fk, fn = IndexFuncs.uniform(8, 1), IndexFuncs.uniform(8, 1), IndexFuncs.uniform(8, 1)
    a = TallSkinnyMatrix(fm, fk, g, 1, 4)
    b = TallSkinnyMatrix(fk, fn, g, 0, 2)
    with pytest.raises(LayoutError) as err:
        multiply_tall_skinny(a, b, TallSkinnyMatrix(fm, fn, g))
    assert err.value.dimension == "K"
    a = TallSkinnyMatrix(fm, fk, g, 0, 2)
    with pytest.raises(LayoutError) as err:
        multiply_tall_skinny(a, TallSkinnyMatrix(fk, fn, g), TallSkinnyMatrix(fm, fn, g))
    assert err.value.dimension == "M"
    with pytest.raises(LayoutError) as err:
        multiply_tall_skinny(
            TallSkinnyMatrix(fm, IndexFuncs.uniform(8, 2), g), TallSkinnyMatrix(fk, fn, g), TallSkinnyMatrix(fm, fn, g)
        )
    assert err.value.dimension == "K"


def test_schedules_bit_identical(rng):
    g = ProcessGrid((4, 2))
    fm, fk, fn = IndexFuncs.uniform(3, 2), IndexFuncs.uniform(40, 2), IndexFuncs.uniform(3, 2)
    a = random_tall_skinny(fm, fk, g, 1, 4, 0.5, rng)
    b = random_tall_skinny(fk, fn, g, 0, 4, 0.5, rng)
    out = []
    for schedule in ("sequential", "parallel"):
        c, ledger = TallSkinnyMatrix(fm, fn, g), Ledger(8)
        multiply_tall_skinny(a, b, c, ledger=ledger, schedule=schedule)
        out.append((c.to_dense(), ledger.snapshot()))
    assert np.array_equal(out[0][0], out[1][0])
    assert out[0][1] == out[1][1]
