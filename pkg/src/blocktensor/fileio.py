"""Matrix and tensor fixture files (text and little-endian binary).

Matrix text layout::

    rows cols nblkrows nblkcols
    <row block sizes>
    <column block sizes>
    i j v00 v01 ...          # one line per stored block, values row-major

The binary variant stores the same fields in the same order as
little-endian int64 (integers) and float64 (values).  Blocks follow until
end of file.

Tensor files add a leading ``rank d1 ... dn`` line, carry one block-size
line per dimension and key each block by ``n`` block coordinates.
"""

import struct

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "MatrixData",
    "TensorData",
    "write_matrix",
    "read_matrix",
    "write_tensor",
    "read_tensor",
]

BINARY_SUFFIXES = (".bin", ".dat")


class MatrixData:
    """Layout-free matrix content: blockings plus ``{(i, j): block}``."""

    def __init__(self, row_sizes, col_sizes, blocks=None):
        self.row_sizes = [int(s) for s in row_sizes]
        self.col_sizes = [int(s) for s in col_sizes]
        self.blocks = dict(blocks or {})

    @property
    def shape(self):
        return sum(self.row_sizes), sum(self.col_sizes)

    @classmethod
    def from_matrix(cls, m):
        sizes = lambda b: [b.size(i) for i in range(len(b))]  # noqa: E731
        return cls(sizes(m.row_blocking), sizes(m.col_blocking), {(i, j): blk for i, j, blk in m.sorted_blocks()})

    def to_matrix(self, grid, row_dist=None, col_dist=None, ranks=None):
        from .matrix import DistMatrix

        m = DistMatrix(self.row_sizes, self.col_sizes, grid, row_dist, col_dist, ranks)
        for (i, j), blk in sorted(self.blocks.items()):
            m.put_block(i, j, blk)
        return m


class TensorData:
    def __init__(self, block_sizes, blocks=None):
        self.block_sizes = [[int(s) for s in sizes] for sizes in block_sizes]
        self.blocks = dict(blocks or {})

    @property
    def rank(self):
        return len(self.block_sizes)

    @property
    def dims(self):
        return tuple(sum(s) for s in self.block_sizes)


def _is_binary(path, binary):
    if binary is not None:
        return binary
    return str(path).endswith(BINARY_SUFFIXES)


def _fmt(values):
    return " ".join(repr(float(v)) for v in values)


def write_matrix(path, data, binary=None):
    rows, cols = data.shape
    items = sorted(data.blocks.items())
    if _is_binary(path, binary):
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4q", rows, cols, len(data.row_sizes), len(data.col_sizes)))
            fh.write(np.asarray(data.row_sizes, dtype="<i8").tobytes())
            fh.write(np.asarray(data.col_sizes, dtype="<i8").tobytes())
            for (i, j), blk in items:
                fh.write(struct.pack("<2q", i, j))
                fh.write(np.ascontiguousarray(blk, dtype="<f8").tobytes())
        return
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"{rows} {cols} {len(data.row_sizes)} {len(data.col_sizes)}\n")
        fh.write(" ".join(map(str, data.row_sizes)) + "\n")
        fh.write(" ".join(map(str, data.col_sizes)) + "\n")
        for (i, j), blk in items:
            fh.write(f"{i} {j} {_fmt(np.ravel(blk))}\n")


def _read_ints(buf, offset, n):
    arr = np.frombuffer(buf, dtype="<i8", count=n, offset=offset)
    return [int(v) for v in arr], offset + 8 * n


def read_matrix(path, binary=None):
    if _is_binary(path, binary):
        with open(path, "rb") as fh:
            buf = fh.read()
        (rows, cols, nbr, nbc), off = _read_ints(buf, 0, 4)
        row_sizes, off = _read_ints(buf, off, nbr)
        col_sizes, off = _read_ints(buf, off, nbc)
        data = MatrixData(row_sizes, col_sizes)
        while off < len(buf):
            (i, j), off = _read_ints(buf, off, 2)
            m, n = row_sizes[i], col_sizes[j]
            vals = np.frombuffer(buf, dtype="<f8", count=m * n, offset=off)
            off += 8 * m * n
            data.blocks[(i, j)] = vals.astype(np.float64).reshape(m, n)
        _check_header(data, rows, cols)
        return data
    with open(path, encoding="ascii") as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    if len(lines) < 3:
        raise InvalidArgumentError(f"{path}: truncated matrix file")
    rows, cols, nbr, nbc = map(int, lines[0])
    row_sizes = [int(v) for v in lines[1]] if nbr else []
    col_sizes = [int(v) for v in lines[2]] if nbc else []
    if len(row_sizes) != nbr or len(col_sizes) != nbc:
        raise InvalidArgumentError(f"{path}: blocking list lengths disagree with header")
    data = MatrixData(row_sizes, col_sizes)
    for fields in lines[3:]:
        i, j = int(fields[0]), int(fields[1])
        m, n = row_sizes[i], col_sizes[j]
        vals = [float(v) for v in fields[2:]]
        if len(vals) != m * n:
            raise InvalidArgumentError(f"{path}: block ({i}, {j}) needs {m * n} values, got {len(vals)}")
        data.blocks[(i, j)] = np.array(vals).reshape(m, n)
    _check_header(data, rows, cols)
    return data


def _check_header(data, rows, cols):
    if data.shape != (rows, cols):
        raise InvalidArgumentError(
            f"header says {rows}x{cols} but block sizes add up to {data.shape[0]}x{data.shape[1]}"
        )


def write_tensor(path, data, binary=None):
    n = data.rank
    items = sorted(data.blocks.items())
    if _is_binary(path, binary):
        with open(path, "wb") as fh:
            fh.write(struct.pack(f"<{n + 1}q", n, *data.dims))
            fh.write(np.asarray([len(s) for s in data.block_sizes], dtype="<i8").tobytes())
            for sizes in data.block_sizes:
                fh.write(np.asarray(sizes, dtype="<i8").tobytes())
            for coords, blk in items:
                fh.write(struct.pack(f"<{n}q", *coords))
                fh.write(np.ascontiguousarray(blk, dtype="<f8").tobytes())
        return
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(" ".join(map(str, (n, *data.dims))) + "\n")
        fh.write(" ".join(str(len(s)) for s in data.block_sizes) + "\n")
        for sizes in data.block_sizes:
            fh.write(" ".join(map(str, sizes)) + "\n")
        for coords, blk in items:
            fh.write(" ".join(map(str, coords)) + " " + _fmt(np.ravel(blk)) + "\n")


def read_tensor(path, binary=None):
    if _is_binary(path, binary):
        with open(path, "rb") as fh:
            buf = fh.read()
        (n,), off = _read_ints(buf, 0, 1)
        dims, off = _read_ints(buf, off, n)
        nblocks, off = _read_ints(buf, off, n)
        block_sizes = []
        for nb in nblocks:
            sizes, off = _read_ints(buf, off, nb)
            block_sizes.append(sizes)
        data = TensorData(block_sizes)
        while off < len(buf):
            coords, off = _read_ints(buf, off, n)
            shape = tuple(block_sizes[d][c] for d, c in enumerate(coords))
            count = int(np.prod(shape))
            vals = np.frombuffer(buf, dtype="<f8", count=count, offset=off)
            off += 8 * count
            data.blocks[tuple(coords)] = vals.astype(np.float64).reshape(shape)
    else:
        with open(path, encoding="ascii") as fh:
            lines = [ln.split() for ln in fh if ln.strip()]
        n = int(lines[0][0])
        dims = [int(v) for v in lines[0][1:]]
        nblocks = [int(v) for v in lines[1]]
        block_sizes = [[int(v) for v in lines[2 + d]] for d in range(n)]
        if [len(s) for s in block_sizes] != nblocks:
            raise InvalidArgumentError(f"{path}: blocking list lengths disagree with header")
        data = TensorData(block_sizes)
        for fields in lines[2 + n :]:
            coords = tuple(int(v) for v in fields[:n])
            shape = tuple(block_sizes[d][c] for d, c in enumerate(coords))
            vals = [float(v) for v in fields[n:]]
            if len(vals) != int(np.prod(shape)):
                raise InvalidArgumentError(f"{path}: block {coords} has {len(vals)} values")
            data.blocks[coords] = np.array(vals).reshape(shape)
    if tuple(dims) != data.dims:
        raise InvalidArgumentError(f"{path}: header dims {dims} disagree with block sizes {data.dims}")
    return data
