import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blocktensor.errors import InvalidArgumentError
from blocktensor.grid_comm import Ledger, ProcessGrid
from blocktensor.matrix import DistMatrix, random_matrix, to_dense
from blocktensor.mult_rect import multiply
from blocktensor.tensor import (
    ContractionSpec,
    SparseTensor,
    contract,
    create_tensor,
    from_dense,
    matrix_to_tensor_index,
    random_tensor,
    tensor_to_matrix_index,
)

from conftest import rel_err


def _maps(rank):
    """Every (row_dims, col_dims) partition with both groups non-empty."""
    dims = range(rank)
    for r in range(1, rank):
        for rows in itertools.permutations(dims, r):
            cols = [d for d in dims if d not in rows]
            for col_order in itertools.permutations(cols):
                yield rows, col_order


def test_rank2_is_a_matrix():
    t = create_tensor([[2, 3], [1, 4, 2]], (2, 2), (0,), (1,), split_factor=1)
    m = DistMatrix([2, 3], [1, 4, 2], ProcessGrid((2, 2)))
    assert t.matrix.factor == 1
    assert t.matrix.nblocks == (2, 3)
    for i, j in itertools.product(range(2), range(3)):
        assert t.owner((i, j)) == m.owner(i, j)
        assert t.to_matrix_index((i, j)) == (i, j)


def test_rank3_backing_shape():
    t = create_tensor([[1] * 4] * 3, (1, 1, 1), (0, 1), (2,))
    assert t.matrix.nblocks == (16, 4)


def test_grid_rank_mismatch():
    with pytest.raises(InvalidArgumentError):
        create_tensor([[1] * 4] * 3, (2, 2))


@pytest.mark.parametrize("rows,cols", [((0,), (0, 1)), ((0,), ()), ((0, 1, 2), ()), ((0,), (2,))])
def test_bad_maps(rows, cols):
    with pytest.raises(InvalidArgumentError):
        create_tensor([[1, 1]] * 3, (1, 1, 1), rows, cols or None if cols else ())


def test_rank_limits():
    with pytest.raises(InvalidArgumentError):
        create_tensor([[1, 1]], (1,))
    with pytest.raises(InvalidArgumentError):
        create_tensor([[1, 1]] * 5, (1,) * 5)


def test_index_examples():
    t = create_tensor([[1] * 3, [1] * 4, [1] * 5], (1, 1, 1), (0, 1), (2,))
    assert tensor_to_matrix_index(t, (0, 0, 0)) == (0, 0)
    assert tensor_to_matrix_index(t, (2, 3, 4)) == (11, 4)
    assert matrix_to_tensor_index(t, 11, 4) == (2, 3, 4)
    with pytest.raises(InvalidArgumentError):
        tensor_to_matrix_index(t, (3, 0, 0))
    with pytest.raises(InvalidArgumentError):
        matrix_to_tensor_index(t, 12, 0)


@pytest.mark.parametrize("rows,cols", list(_maps(3)))
def test_index_round_trip_exhaustive(rows, cols):
    t = create_tensor([[1] * 2, [1] * 3, [1] * 2], (1, 1, 1), rows, cols)
    seen = set()
    for coords in itertools.product(range(2), range(3), range(2)):
        ij = t.to_matrix_index(coords)
        assert t.to_tensor_index(*ij) == coords
        seen.add(ij)
    assert len(seen) == 12


def test_ownership_follows_tensor_grid():
    grid = ProcessGrid((2, 1, 3))
    t = create_tensor([[1] * 4, [2] * 3, [1] * 5], grid, (0, 2), (1,), split_factor=1)
    for coords in itertools.product(range(4), range(3), range(5)):
        want = grid.rank_of([c % g for c, g in zip(coords, grid.dims)])
        assert t.owner(coords) == want


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_put_get_round_trip(seed, rank):
    rng = np.random.default_rng(seed)
    blockings = [list(rng.integers(1, 4, size=rng.integers(1, 4))) for _ in range(rank)]
    maps = list(_maps(rank))
    rows, cols = maps[rng.integers(len(maps))]
    grid = tuple(int(g) for g in rng.integers(1, 3, size=rank))
    t = random_tensor(blockings, grid, 0.5, rng, rows, cols)
    dense = t.to_dense()
    for coords, blk in t.iter_blocks():
        assert np.array_equal(t.get_block(coords), blk)
        sl = tuple(slice(sum(b[:c]), sum(b[: c + 1])) for b, c in zip(blockings, coords))
        assert np.array_equal(dense[sl], blk)
    # the same data under any other map
    u = from_dense(dense, blockings, grid, *maps[0])
    assert np.array_equal(u.to_dense(), dense)


def test_block_shape_checked():
    t = create_tensor([[2], [3]], (1, 1))
    with pytest.raises(InvalidArgumentError):
        t.put_block((0, 0), np.ones((3, 2)))


# -- contraction --


def _nested_loop_mn(a, b):
    """C[m, n] = sum_{k, l} A[m, k, l] B[k, l, n] with explicit loops."""
    mm, kk, ll = a.shape
    nn = b.shape[2]
    out = np.zeros((mm, nn))
    for m in range(mm):
        for n in range(nn):
            acc = 0.0
            for k in range(kk):
                for l in range(ll):
                    acc += a[m, k, l] * b[k, l, n]
            out[m, n] = acc
    return out


def test_rank2_matches_matrix_multiply(rng):
    g = ProcessGrid((2, 2))
    rs, ks, cs = [2, 3, 1], [1, 2, 2, 1], [3, 2]
    pa, pb = random_matrix(rs, ks, g, 0.6, rng), random_matrix(ks, cs, g, 0.6, rng)
    ta = from_dense(to_dense(pa), [rs, ks], g, split_factor=1)
    tb = from_dense(to_dense(pb), [ks, cs], g, split_factor=1)
    tc = create_tensor([rs, cs], g, split_factor=1)
    l1, l2 = Ledger(4), Ledger(4)
    contract(ta, tb, ContractionSpec((1,), (0,)), tc, "cannon", ledger=l2)
    pc = multiply(pa, pb, DistMatrix(rs, cs, g), "cannon", ledger=l1)[0]
    assert np.array_equal(tc.to_dense(), to_dense(pc))
    assert l1.snapshot() == l2.snapshot()


@pytest.mark.parametrize("nprocs", [1, 4, 8])
def test_canonical_contraction(rng, nprocs):
    bl = {"m": [2] * 3, "k": [2] * 2, "l": [2] * 2, "n": [2] * 3}
    a = random_tensor([bl["m"], bl["k"], bl["l"]], None if nprocs == 1 else _grid3(nprocs), 0.7, rng, (0,), (1, 2))
    b = random_tensor([bl["k"], bl["l"], bl["n"]], a.grid, 0.7, rng, (0, 1), (2,))
    c = SparseTensor([bl["m"], bl["n"]], _grid2(nprocs))
    contract(a, b, ContractionSpec((1, 2), (0, 1)), c)
    assert rel_err(c.to_dense(), _nested_loop_mn(a.to_dense(), b.to_dense())) <= 1e-12


def _grid3(p):
    return {4: (2, 2, 1), 8: (2, 2, 2)}[p]


def _grid2(p):
    return {1: (1, 1), 4: (2, 2), 8: (4, 2)}[p]


def test_incompatible_layout_same_values_more_traffic(rng):
    bl = [[2] * 3, [2] * 2, [2] * 2, [2] * 3]
    # tensor grids chosen so that all three backing matrices land on one 2x2 grid
    a = random_tensor(bl[:3], (2, 1, 2), 0.7, rng, (0,), (1, 2))
    b = random_tensor(bl[1:], (1, 2, 2), 0.7, rng, (0, 1), (2,))
    fast, lf = SparseTensor([bl[0], bl[3]], (2, 2)), Ledger(4)
    contract(a, b, ContractionSpec((1, 2), (0, 1)), fast, ledger=lf)
    assert lf.sent("tensor.remap").sum() == 0

    a2 = from_dense(a.to_dense(), bl[:3], (2, 1, 2), (2, 1), (0,))
    b2 = from_dense(b.to_dense(), bl[1:], (1, 2, 2), (2,), (1, 0))
    slow, ls = SparseTensor([bl[0], bl[3]], (2, 2), (1,), (0,)), Ledger(4)
    contract(a2, b2, ContractionSpec((1, 2), (0, 1)), slow, ledger=ls)
    assert ls.sent("tensor.remap").sum() > 0
    assert ls.total_sent() > lf.total_sent()
    assert rel_err(slow.to_dense(), fast.to_dense()) <= 1e-12


def test_output_permutation(rng):
    a = random_tensor([[2, 1], [3], [1, 2]], (1, 1, 1), 1.0, rng)
    b = random_tensor([[3], [2, 2]], (1, 1), 1.0, rng)
    # natural order (a0, a2, b1); ask for (b1, a0, a2)
    c = SparseTensor([[2, 2], [2, 1], [1, 2]], (1, 1, 1))
    contract(a, b, ContractionSpec((1,), (0,), out=(2, 0, 1)), c)
    want = np.einsum("ikj,kn->nij", a.to_dense(), b.to_dense())
    assert rel_err(c.to_dense(), want) <= 1e-12


def test_contraction_errors(rng):
    a = create_tensor([[2], [3], [1]], (1, 1, 1))
    b = create_tensor([[2], [1]], (1, 1))
    with pytest.raises(InvalidArgumentError):
        contract(a, b, ContractionSpec((1,), (0,)), create_tensor([[2], [1], [1]], (1, 1, 1)))
    with pytest.raises(InvalidArgumentError):
        contract(a, b, ContractionSpec((0,), (0,)), create_tensor([[3], [1]], (1, 1)))
    with pytest.raises(InvalidArgumentError):
        ContractionSpec((0, 1), (0,))


def test_no_spurious_blocks(rng):
    a = random_tensor([[1] * 3, [1] * 4, [1] * 2], (1, 2, 1), 0.3, rng, (0,), (1, 2))
    b = random_tensor([[1] * 4, [1] * 2, [1] * 3], (1, 2, 1), 0.3, rng, (0, 1), (2,))
    c = SparseTensor([[1] * 3, [1] * 3], (2, 1))
    contract(a, b, ContractionSpec((1, 2), (0, 1)), c)
    a_keys = {coords for coords, _ in a.iter_blocks()}
    b_keys = {coords for coords, _ in b.iter_blocks()}
    for (m, n), _ in c.iter_blocks():
        assert any((m, k, l) in a_keys and (k, l, n) in b_keys for k in range(4) for l in range(2))


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_rank4_by_rank3(seed):
    rng = np.random.default_rng(seed)
    bl = [list(rng.integers(1, 4, size=rng.integers(1, 4))) for _ in range(5)]
    # A[i, j, k, l] B[l, j, n] -> C[i, k, n]
    a = random_tensor([bl[0], bl[1], bl[2], bl[3]], (2, 1, 2, 1), 0.6, rng, (0, 2), (1, 3))
    b = random_tensor([bl[3], bl[1], bl[4]], (1, 2, 2), 0.6, rng, (2,), (0, 1))
    c = SparseTensor([bl[0], bl[2], bl[4]], (1, 2, 2))
    contract(a, b, ContractionSpec((1, 3), (1, 0)), c)
    want = np.einsum("ijkl,ljn->ikn", a.to_dense(), b.to_dense())
    assert rel_err(c.to_dense(), want) <= 1e-12
