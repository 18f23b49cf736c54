"""Command-line driver: fixtures, simulated multiplications and volume reports.

Commands
--------
gen       write a random block-sparse matrix (or tensor with ``--dims``)
multiply  ``C = A @ B`` on a simulated grid, with a CSV volume report
sweep     rectangular-vs-Cannon volume ratios over occupancies and grids
contract  tensor contraction described by a JSON spec file

Reports are CSV with one header line.  ``ratio`` is the busiest rank's
volume over the model's per-process volume.  ``BLOCKTENSOR_SEED`` overrides the
default ``--seed``.  Exit status is 0 on success, 1 when ``--verify`` finds a
mismatch and 2 on usage errors.
"""

import argparse
import csv
import io
import json
import math
import os
import sys

import numpy as np

from . import cost_model
from .errors import BlockTensorError
from .fileio import MatrixData, TensorData, read_matrix, read_tensor, write_matrix, write_tensor
from .grid_comm import SCHEDULES, Ledger, ProcessGrid, balanced_dims
from .matrix import DistMatrix, random_matrix, to_dense
from .mult_rect import multiply
from .tensor import ContractionSpec, SparseTensor, contract

REPORT_COLUMNS = [
    "algo",
    "M",
    "N",
    "K",
    "O_A",
    "O_B",
    "O_C",
    "P",
    "predicted_volume",
    "measured_mean_volume",
    "measured_max_volume",
    "ratio",
]
SWEEP_COLUMNS = [
    "case",
    "M",
    "N",
    "K",
    "O_A",
    "O_B",
    "O_C",
    "P",
    "cannon_measured",
    "rect_measured",
    "measured_ratio",
    "predicted_ratio",
]
VERIFY_LIMIT = 512
VERIFY_RTOL = 1e-12


class UsageError(Exception):
    pass


def default_seed():
    return int(os.environ.get("BLOCKTENSOR_SEED", "0"))


def fmt(value):
    """Locale-free number formatting for CSV cells."""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return repr(float(value))


def write_rows(path, columns, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(row[c]) for c in columns])
    if path in (None, "-"):
        sys.stdout.write(buf.getvalue())
    else:
        with open(path, "w", encoding="ascii", newline="") as fh:
            fh.write(buf.getvalue())


def ratio(measured, predicted):
    if predicted == 0:
        return 1.0 if measured == 0 else math.inf
    return measured / predicted


# ---------------------------------------------------------------------------
# grids


def parse_grid(text):
    """``"q x q"`` style or a plain process count."""
    text = text.lower().replace(" ", "")
    try:
        if "x" in text:
            dims = tuple(int(v) for v in text.split("x"))
            if len(dims) != 2:
                raise ValueError
            return dims
        return int(text)
    except ValueError:
        raise UsageError(f"bad --grid {text!r}; use RxC or a process count") from None


def grid_for(algo, spec):
    """2D grid dims for ``algo`` from a parsed ``--grid``."""
    if isinstance(spec, tuple):
        dims = spec
    else:
        q = math.isqrt(spec)
        if algo == "cannon" and q * q != spec:
            raise UsageError(
                f"cannon needs a square process count; {spec} is not square, "
                f"the largest square below it is {q * q} ({q}x{q})"
            )
        dims = (q, q) if q * q == spec else balanced_dims(spec, 2)
    if min(dims) < 1:
        raise UsageError("grid extents must be positive")
    if algo == "cannon" and dims[0] != dims[1]:
        q = math.isqrt(dims[0] * dims[1])
        raise UsageError(f"cannon needs a square grid; try {q}x{q}")
    return ProcessGrid(dims)


# ---------------------------------------------------------------------------
# gen


def random_sizes(total, lo, hi, rng):
    """Block sizes drawn uniformly from ``[lo, hi]``; the last is trimmed to fit."""
    sizes, left = [], total
    while left > 0:
        s = min(int(rng.integers(lo, hi + 1)), left)
        sizes.append(s)
        left -= s
    return sizes


def cmd_gen(args):
    if not 0.0 <= args.occupancy <= 1.0:
        raise UsageError(f"--occupancy {args.occupancy} outside [0, 1]")
    if not 1 <= args.block_min <= args.block_max:
        raise UsageError("need 1 <= --block-min <= --block-max")
    rng = np.random.default_rng(args.seed)
    if args.dims:
        dims = [int(v) for v in args.dims.split(",")]
        sizes = [random_sizes(d, args.block_min, args.block_max, rng) for d in dims]
        data = TensorData(sizes)
        for coords in np.ndindex(*[len(s) for s in sizes]):
            if rng.random() < args.occupancy:
                shape = tuple(s[c] for s, c in zip(sizes, coords))
                data.blocks[tuple(int(c) for c in coords)] = rng.standard_normal(shape)
        write_tensor(args.out, data)
        return 0
    if args.rows is None or args.cols is None:
        raise UsageError("gen needs --rows and --cols (or --dims for a tensor)")
    rows = random_sizes(args.rows, args.block_min, args.block_max, rng)
    cols = random_sizes(args.cols, args.block_min, args.block_max, rng)
    data = MatrixData(rows, cols)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            if rng.random() < args.occupancy:
                data.blocks[(i, j)] = rng.standard_normal((r, c))
    write_matrix(args.out, data)
    return 0


# ---------------------------------------------------------------------------
# multiply


def run_multiply(a_data, b_data, algo, grid_spec, schedule=None):
    """Multiply two fixtures; returns ``(c, algo, report_row)``."""
    if a_data.col_sizes != b_data.row_sizes:
        raise UsageError("inner block sizes of A and B differ")
    grid = grid_for(algo, grid_spec)
    a = a_data.to_matrix(grid)
    b = b_data.to_matrix(grid)
    c = DistMatrix(a_data.row_sizes, b_data.col_sizes, grid)
    ledger = Ledger(grid.size)
    c, used = multiply(a, b, c, algo, ledger=ledger, schedule=schedule)
    row = report_row(used, a, b, c, grid.size, ledger)
    return c, used, row


def report_row(algo, a, b, c, nprocs, ledger):
    m, k = a.shape
    n = b.shape[1]
    spec = cost_model.MultiplySpec(m, n, k, a.occupancy(), b.occupancy(), c.occupancy(), nprocs)
    predicted = cost_model.predicted_volumes(spec)[algo]
    mean, peak = ledger.mean_sent(), ledger.max_sent()
    return {
        "algo": algo,
        "M": m,
        "N": n,
        "K": k,
        "O_A": spec.O_A,
        "O_B": spec.O_B,
        "O_C": spec.O_C,
        "P": nprocs,
        "predicted_volume": predicted,
        "measured_mean_volume": mean,
        "measured_max_volume": peak,
        "ratio": ratio(peak, predicted),
    }


def check_verify_size(*shapes):
    if max(max(s) for s in shapes) > VERIFY_LIMIT:
        raise UsageError(f"--verify needs every dimension <= {VERIFY_LIMIT}")


def relative_error(got, want):
    scale = np.linalg.norm(want)
    diff = np.linalg.norm(got - want)
    return diff / scale if scale else diff


def cmd_multiply(args):
    a_data, b_data = read_matrix(args.a), read_matrix(args.b)
    if args.verify:
        check_verify_size(a_data.shape, b_data.shape)
    c, _, row = run_multiply(a_data, b_data, args.algo, parse_grid(args.grid), args.schedule)
    if args.c_out:
        write_matrix(args.c_out, MatrixData.from_matrix(c))
    write_rows(args.report, REPORT_COLUMNS, [row])
    if args.verify:
        want = dense_of(a_data) @ dense_of(b_data)
        err = relative_error(to_dense(c), want)
        if err > VERIFY_RTOL:
            print(f"verify failed: relative error {err:.3e}", file=sys.stderr)
            return 1
    return 0


def dense_of(data):
    out = np.zeros(data.shape)
    ro = np.concatenate([[0], np.cumsum(data.row_sizes)])
    co = np.concatenate([[0], np.cumsum(data.col_sizes)])
    for (i, j), blk in data.blocks.items():
        out[ro[i] : ro[i + 1], co[j] : co[j + 1]] = blk
    return out


# ---------------------------------------------------------------------------
# sweep


def parse_list(text, kind=float):
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad list {text!r}") from None


def cmd_sweep(args):
    occupancies = parse_list(args.occupancies)
    grids = parse_list(args.grids, int)
    sizes = parse_list(args.sizes, int)
    if len(sizes) != 3:
        raise UsageError("--sizes needs M,N,K")
    if any(not 0.0 <= o <= 1.0 for o in occupancies):
        raise UsageError("occupancies must lie in [0, 1]")
    m, n, k = sizes
    rect = "case1" if args.case == 1 else "case2"
    bs = args.block_size
    blk = lambda total: [bs] * (total // bs) + ([total % bs] if total % bs else [])  # noqa: E731
    rows = []
    for nprocs in grids:
        q = math.isqrt(nprocs)
        if q * q != nprocs:
            raise UsageError(f"sweep grids must be square process counts, got {nprocs}")
        grid = ProcessGrid((q, q))
        for occ in occupancies:
            rng = np.random.default_rng(args.seed)
            a = random_matrix(blk(m), blk(k), grid, occ, rng)
            b = random_matrix(blk(k), blk(n), grid, occ, rng)
            volumes = {}
            result = None
            for algo in ("cannon", rect):
                c = DistMatrix(a.row_blocking, b.col_blocking, grid)
                ledger = Ledger(nprocs)
                multiply(a, b, c, algo, ledger=ledger, schedule=args.schedule)
                volumes[algo] = ledger.mean_sent()
                result = c
            spec = cost_model.MultiplySpec(m, n, k, a.occupancy(), b.occupancy(), result.occupancy(), nprocs)
            pred = cost_model.predicted_volumes(spec)
            rows.append(
                {
                    "case": args.case,
                    "M": m,
                    "N": n,
                    "K": k,
                    "O_A": spec.O_A,
                    "O_B": spec.O_B,
                    "O_C": spec.O_C,
                    "P": nprocs,
                    "cannon_measured": volumes["cannon"],
                    "rect_measured": volumes[rect],
                    "measured_ratio": ratio(volumes[rect], volumes["cannon"]),
                    "predicted_ratio": ratio(pred[rect], pred["cannon"]),
                }
            )
    write_rows(args.report, SWEEP_COLUMNS, rows)
    return 0


# ---------------------------------------------------------------------------
# contract


def tensor_from_data(data, nprocs, row_dims, col_dims=None):
    t = SparseTensor(data.block_sizes, None, row_dims, col_dims, nprocs=nprocs)
    for coords, blk in sorted(data.blocks.items()):
        t.put_block(coords, blk)
    return t


def tensor_dense(data):
    out = np.zeros(data.dims)
    offs = [np.concatenate([[0], np.cumsum(s)]) for s in data.block_sizes]
    for coords, blk in data.blocks.items():
        out[tuple(slice(o[c], o[c + 1]) for o, c in zip(offs, coords))] = blk
    return out


def load_contraction(path):
    """Read a JSON contraction description.

    Keys: ``contract_a``, ``contract_b`` (lists), optional ``out``
    (permutation of the free dimensions) and optional ``map_a``, ``map_b``,
    ``map_c`` (``[row_dims, col_dims]``).
    """
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        spec = ContractionSpec(raw["contract_a"], raw["contract_b"], raw.get("out"))
    except KeyError as exc:
        raise UsageError(f"{path}: missing key {exc}") from None
    maps = {key: raw.get(f"map_{key}") for key in "abc"}
    return spec, maps


def default_c_map(sources):
    """C rows from A's free dimensions and columns from B's, when both exist."""
    rows = [cd for cd, (w, _) in enumerate(sources) if w == "a"]
    if not rows or len(rows) == len(sources):
        rows = [0]
    return [rows, None]


def cmd_contract(args):
    spec, maps = load_contraction(args.spec)
    a_data, b_data = read_tensor(args.a), read_tensor(args.b)
    nprocs = parse_grid(args.grid)
    if isinstance(nprocs, tuple):
        nprocs = nprocs[0] * nprocs[1]
    if args.verify:
        check_verify_size(a_data.dims, b_data.dims)
    fa, fb = spec.free(a_data.rank, b_data.rank)
    map_a = maps["a"] or [list(fa), list(spec.contract_a)]
    map_b = maps["b"] or [list(spec.contract_b), list(fb)]
    a = tensor_from_data(a_data, nprocs, *map_a)
    b = tensor_from_data(b_data, nprocs, *map_b)
    sources = spec.output_sources(a.rank, b.rank)
    c_sizes = [(a_data if w == "a" else b_data).block_sizes[d] for w, d in sources]
    map_c = maps["c"] or default_c_map(sources)
    c = SparseTensor(c_sizes, None, map_c[0], map_c[1], nprocs=nprocs)
    ledger = Ledger(nprocs)
    contract(a, b, spec, c, ledger=ledger, schedule=args.schedule)

    if args.c_out:
        write_tensor(args.c_out, TensorData(c_sizes, {co: blk for co, blk in c.iter_blocks()}))
    dim = lambda data, dims: math.prod(data.dims[d] for d in dims)  # noqa: E731
    m, n, k = dim(a_data, fa), dim(b_data, fb), dim(a_data, spec.contract_a)
    mspec = cost_model.MultiplySpec(
        m, n, k, a.occupancy(), b.occupancy(), c.occupancy(), nprocs
    )
    volumes = cost_model.predicted_volumes(mspec)
    algo = min(cost_model.ALGORITHMS, key=lambda name: (volumes[name], cost_model.ALGORITHMS.index(name)))
    mean, peak = ledger.mean_sent(), ledger.max_sent()
    row = {
        "algo": f"contract/{algo}",
        "M": m,
        "N": n,
        "K": k,
        "O_A": mspec.O_A,
        "O_B": mspec.O_B,
        "O_C": mspec.O_C,
        "P": nprocs,
        "predicted_volume": volumes[algo],
        "measured_mean_volume": mean,
        "measured_max_volume": peak,
        "ratio": ratio(peak, volumes[algo]),
    }
    write_rows(args.report, REPORT_COLUMNS, [row])
    if args.verify:
        letters = "abcdefghijklmnop"
        la = [letters[d] for d in range(a.rank)]
        lb = [letters[a.rank + d] for d in range(b.rank)]
        for da, db in zip(spec.contract_a, spec.contract_b):
            lb[db] = la[da]
        lc = [la[d] if w == "a" else lb[d] for w, d in sources]
        want = np.einsum(f"{''.join(la)},{''.join(lb)}->{''.join(lc)}", tensor_dense(a_data), tensor_dense(b_data))
        err = relative_error(c.to_dense(), want)
        if err > VERIFY_RTOL:
            print(f"verify failed: relative error {err:.3e}", file=sys.stderr)
            return 1
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="blocktensor", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=default_seed())
        p.add_argument("--schedule", choices=SCHEDULES, default=None)
        p.add_argument("--report", default="-", help="CSV output path ('-' for stdout)")

    g = sub.add_parser("gen", help="write a random fixture")
    g.add_argument("--rows", type=int)
    g.add_argument("--cols", type=int)
    g.add_argument("--dims", help="comma-separated tensor dimensions (writes a tensor)")
    g.add_argument("--block-min", type=int, default=1)
    g.add_argument("--block-max", type=int, default=9)
    g.add_argument("--occupancy", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=default_seed())
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    m = sub.add_parser("multiply", help="multiply two matrix files")
    m.add_argument("--algo", choices=("cannon", "case1", "case2", "auto"), default="auto")
    m.add_argument("--grid", default="1")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.add_argument("--c-out")
    m.add_argument("--verify", action="store_true")
    common(m)
    m.set_defaults(func=cmd_multiply)

    s = sub.add_parser("sweep", help="rectangular/Cannon volume ratios")
    s.add_argument("--case", type=int, choices=(1, 2), default=1)
    s.add_argument("--occupancies", default="0.1,0.3,0.5,1.0")
    s.add_argument("--grids", default="4,16")
    s.add_argument("--sizes", default="32,32,512", help="M,N,K in elements")
    s.add_argument("--block-size", type=int, default=8)
    common(s)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("contract", help="contract two tensor files")
    c.add_argument("--spec", required=True, help="JSON contraction description")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.add_argument("--c-out")
    c.add_argument("--grid", default="1")
    c.add_argument("--verify", action="store_true")
    common(c)
    c.set_defaults(func=cmd_contract)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (BlockTensorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
