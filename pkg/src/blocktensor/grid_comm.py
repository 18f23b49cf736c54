"""Simulated message-passing execution: process grids, rank workers, ledger.

Every simulated rank runs its program in its own thread.  Ranks exchange
data only through :class:`RankContext.send` / :class:`RankContext.recv`;
every message is counted in a :class:`Ledger` (unit: matrix elements,
8 bytes each; index metadata is counted in a separate column).

Two schedules are available:

``"sequential"``
    Exactly one worker runs at a time.  Control passes to the next runnable
    rank (in rank order) only when the running rank blocks in ``recv`` or
    finishes.
``"parallel"``
    All workers run concurrently and synchronise through the message queues.

Programs that only use local state and messages give identical results and
ledgers under both schedules.
"""

import contextlib
import copy
import math
import threading
from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np

from .errors import DeadlockError, InvalidArgumentError

__all__ = [
    "ProcessGrid",
    "Subgroup",
    "Ledger",
    "SimComm",
    "RankContext",
    "create_grid",
    "coords_of",
    "rank_of",
    "split_grid",
    "run_spmd",
    "count_payload",
    "balanced_dims",
    "scheduling",
    "get_default_schedule",
]

SCHEDULES = ("sequential", "parallel")
_default_schedule = "sequential"


def get_default_schedule():
    return _default_schedule


@contextlib.contextmanager
def scheduling(schedule):
    """Temporarily change the schedule used when ``schedule=None`` is passed."""
    global _default_schedule
    if schedule not in SCHEDULES:
        raise InvalidArgumentError(f"unknown schedule {schedule!r}")
    previous = _default_schedule
    _default_schedule = schedule
    try:
        yield
    finally:
        _default_schedule = previous


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class ProcessGrid:
    """An n-dimensional grid of ranks enumerated in row-major order."""

    dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims:
            raise InvalidArgumentError("grid needs at least one dimension")
        if any(d < 1 for d in dims):
            raise InvalidArgumentError(f"grid extents must be >= 1, got {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def ndim(self):
        return len(self.dims)

    @property
    def size(self):
        return math.prod(self.dims)

    def coords_of(self, rank):
        if not 0 <= rank < self.size:
            raise InvalidArgumentError(f"rank {rank} outside [0, {self.size})")
        coords = []
        for d in reversed(self.dims):
            coords.append(rank % d)
            rank //= d
        return tuple(reversed(coords))

    def rank_of(self, coords):
        coords = tuple(coords)
        if len(coords) != len(self.dims):
            raise InvalidArgumentError(
                f"expected {len(self.dims)} coordinates, got {len(coords)}"
            )
        rank = 0
        for c, d in zip(coords, self.dims):
            if not 0 <= c < d:
                raise InvalidArgumentError(f"coordinates {coords} outside grid {self.dims}")
            rank = rank * d + c
        return rank

    def is_square(self):
        return self.ndim == 2 and self.dims[0] == self.dims[1]


def create_grid(dims):
    return ProcessGrid(tuple(dims))


def coords_of(grid, rank):
    return grid.coords_of(rank)


def rank_of(grid, coords):
    return grid.rank_of(coords)


@dataclass(frozen=True)
class Subgroup:
    """One piece of a grid split along ``dim``.

    ``members`` lists parent ranks in the row-major order of the local grid,
    so ``members[local_rank]`` is the parent rank of a local rank.
    """

    parent: ProcessGrid
    dim: int
    factor: int
    index: int
    start: int
    grid: ProcessGrid
    members: tuple

    def local_rank(self, parent_rank):
        return self.members.index(parent_rank)

    def __contains__(self, parent_rank):
        return parent_rank in self.members


def split_counts(n, factor):
    """Split ``n`` items into ``factor`` counts; the remainder goes first."""
    base, rem = divmod(n, factor)
    return [base + 1 if s < rem else base for s in range(factor)]


def split_grid(grid, dim, factor):
    """Divide grid dimension ``dim`` into ``factor`` contiguous subgroups."""
    if not 0 <= dim < grid.ndim:
        raise InvalidArgumentError(f"grid has no dimension {dim}")
    if not 1 <= factor <= grid.dims[dim]:
        raise InvalidArgumentError(
            f"split factor {factor} must lie in [1, {grid.dims[dim]}]"
        )
    groups = []
    start = 0
    for s, count in enumerate(split_counts(grid.dims[dim], factor)):
        local_dims = list(grid.dims)
        local_dims[dim] = count
        local = ProcessGrid(tuple(local_dims))
        members = []
        for lr in range(local.size):
            c = list(local.coords_of(lr))
            c[dim] += start
            members.append(grid.rank_of(c))
        groups.append(Subgroup(grid, dim, factor, s, start, local, tuple(members)))
        start += count
    return groups


def balanced_dims(nprocs, ndim):
    """Most balanced factorisation of ``nprocs`` into ``ndim`` factors.

    Factors are returned in non-increasing order.
    """
    if nprocs < 1 or ndim < 1:
        raise InvalidArgumentError("need nprocs >= 1 and ndim >= 1")
    best = None

    def search(remaining, slots, smallest, acc):
        nonlocal best
        if slots == 1:
            if remaining >= smallest:
                cand = tuple(sorted(acc + [remaining], reverse=True))
                key = (max(cand) - min(cand), cand)
                if best is None or key < best[0]:
                    best = (key, cand)
            return
        for f in range(smallest, remaining + 1):
            if remaining % f == 0:
                search(remaining // f, slots - 1, f, acc + [f])

    search(nprocs, ndim, 1, [])
    return best[1]


# ---------------------------------------------------------------------------
# ledger


def count_payload(payload):
    """Return ``(elements, metadata)`` carried by a message payload.

    Floating-point arrays and scalars count as matrix elements; integers
    (block indices, sizes) count as metadata.  Containers are walked
    recursively and dict keys are counted as metadata.
    """
    if payload is None:
        return 0, 0
    if isinstance(payload, np.ndarray):
        if np.issubdtype(payload.dtype, np.floating) or np.issubdtype(
            payload.dtype, np.complexfloating
        ):
            return int(payload.size), 0
        return 0, int(payload.size)
    if isinstance(payload, (bool, np.bool_)):
        return 0, 0
    if isinstance(payload, (int, np.integer)):
        return 0, 1
    if isinstance(payload, (float, np.floating)):
        return 1, 0
    if isinstance(payload, str):
        return 0, 0
    elements = meta = 0
    if isinstance(payload, dict):
        for key, value in payload.items():
            e, m = count_payload(key)
            e2, m2 = count_payload(value)
            elements += e + e2
            meta += m + m2
        return elements, meta
    if isinstance(payload, (list, tuple)):
        for item in payload:
            e, m = count_payload(item)
            elements += e
            meta += m
        return elements, meta
    raise TypeError(f"cannot count payload of type {type(payload).__name__}")


class Ledger:
    """Per-rank counters of communicated elements, split by phase."""

    def __init__(self, size):
        self.size = int(size)
        zeros = lambda: np.zeros(self.size, dtype=np.int64)  # noqa: E731
        self._sent = defaultdict(zeros)
        self._received = defaultdict(zeros)
        self._meta_sent = defaultdict(zeros)
        self._meta_received = defaultdict(zeros)

    def record_send(self, rank, elements, meta, phase):
        self._sent[phase][rank] += elements
        self._meta_sent[phase][rank] += meta

    def record_recv(self, rank, elements, meta, phase):
        self._received[phase][rank] += elements
        self._meta_received[phase][rank] += meta

    @property
    def phases(self):
        return sorted(set(self._sent) | set(self._received))

    def _collect(self, table, phase):
        if phase is None:
            out = np.zeros(self.size, dtype=np.int64)
            for arr in table.values():
                out += arr
            return out
        if isinstance(phase, str):
            phase = (phase,)
        out = np.zeros(self.size, dtype=np.int64)
        for p in phase:
            if p in table:
                out += table[p]
        return out

    def sent(self, phase=None):
        """Elements sent per rank (all phases, one phase, or a tuple of phases)."""
        return self._collect(self._sent, phase)

    def received(self, phase=None):
        return self._collect(self._received, phase)

    def meta_sent(self, phase=None):
        return self._collect(self._meta_sent, phase)

    def meta_received(self, phase=None):
        return self._collect(self._meta_received, phase)

    def sent_bytes(self, phase=None):
        return 8 * self.sent(phase)

    def total_sent(self, phase=None):
        return int(self.sent(phase).sum())

    def total_received(self, phase=None):
        return int(self.received(phase).sum())

    def mean_sent(self, phase=None):
        return float(self.sent(phase).mean())

    def max_sent(self, phase=None):
        return int(self.sent(phase).max())

    def merge(self, other):
        if other.size != self.size:
            raise InvalidArgumentError("cannot merge ledgers of different sizes")
        for mine, theirs in (
            (self._sent, other._sent),
            (self._received, other._received),
            (self._meta_sent, other._meta_sent),
            (self._meta_received, other._meta_received),
        ):
            for phase, arr in theirs.items():
                mine[phase] += arr
        return self

    def snapshot(self):
        """Comparable representation, used by determinism checks."""
        out = {}
        for name, table in (
            ("sent", self._sent),
            ("received", self._received),
            ("meta_sent", self._meta_sent),
            ("meta_received", self._meta_received),
        ):
            for phase in sorted(table):
                out[(name, phase)] = tuple(int(v) for v in table[phase])
        return out

    def __repr__(self):
        return f"Ledger(size={self.size}, total_sent={self.total_sent()})"


# ---------------------------------------------------------------------------
# communicator and scheduler


@dataclass
class _Message:
    payload: object
    elements: int
    meta: int
    tag: object
    phase: str


class _Abort(Exception):
    pass


_READY, _BLOCKED, _DONE = "ready", "blocked", "done"


class SimComm:
    """Message queues, scheduler state and ledger shared by the rank workers."""

    def __init__(self, size, ledger=None, schedule=None):
        self.size = int(size)
        if self.size < 1:
            raise InvalidArgumentError("communicator needs at least one rank")
        self.ledger = ledger if ledger is not None else Ledger(self.size)
        if self.ledger.size != self.size:
            raise InvalidArgumentError("ledger size does not match communicator")
        self.schedule = schedule or _default_schedule
        if self.schedule not in SCHEDULES:
            raise InvalidArgumentError(f"unknown schedule {self.schedule!r}")
        self._cv = threading.Condition()
        self._queues = defaultdict(deque)
        self._status = [_READY] * self.size
        self._waiting = [None] * self.size
        self._turn = 0
        self._abort = False
        self._error = None

    # -- helpers (caller holds the lock) --

    def _runnable(self, r):
        if self._status[r] == _READY:
            return True
        if self._status[r] == _BLOCKED:
            return bool(self._queues[(self._waiting[r], r)])
        return False

    def _blocked_report(self):
        return {
            r: self._waiting[r]
            for r in range(self.size)
            if self._status[r] == _BLOCKED
        }

    def _fail(self, exc):
        if self._error is None:
            self._error = exc
        self._abort = True
        self._cv.notify_all()

    def _deadlock(self):
        blocked = self._blocked_report()
        desc = ", ".join(f"rank {r} waits on rank {s}" for r, s in sorted(blocked.items()))
        self._fail(DeadlockError(f"deadlock: {desc}", blocked))

    def _handoff(self, rank):
        """Sequential schedule: pass control to the next runnable rank."""
        for step in range(1, self.size + 1):
            r = (rank + step) % self.size
            if self._runnable(r):
                self._turn = r
                self._cv.notify_all()
                return
        if any(s != _DONE for s in self._status):
            self._deadlock()

    def _all_stuck(self):
        live = [r for r in range(self.size) if self._status[r] != _DONE]
        return bool(live) and all(
            self._status[r] == _BLOCKED and not self._queues[(self._waiting[r], r)]
            for r in live
        )

    def _wait_turn(self, rank):
        while self._turn != rank and not self._abort:
            self._cv.wait()
        if self._abort:
            raise _Abort()

    # -- public operations --

    def send(self, src, dest, payload, *, phase="default", tag=None, elements=None, meta=None):
        if not 0 <= dest < self.size:
            raise InvalidArgumentError(f"destination rank {dest} outside [0, {self.size})")
        e, m = count_payload(payload)
        if elements is not None:
            e = int(elements)
        if meta is not None:
            m = int(meta)
        msg = _Message(copy.deepcopy(payload), e, m, tag, phase)
        with self._cv:
            if self._abort:
                raise _Abort()
            if src != dest:
                self.ledger.record_send(src, e, m, phase)
            self._queues[(src, dest)].append(msg)
            self._cv.notify_all()

    def recv(self, rank, src, *, tag=None):
        if not 0 <= src < self.size:
            raise InvalidArgumentError(f"source rank {src} outside [0, {self.size})")
        with self._cv:
            queue = self._queues[(src, rank)]
            while not queue:
                if self._abort:
                    raise _Abort()
                self._status[rank] = _BLOCKED
                self._waiting[rank] = src
                if self.schedule == "sequential":
                    self._handoff(rank)
                    self._wait_turn(rank)
                else:
                    if self._all_stuck():
                        self._deadlock()
                        raise _Abort()
                    self._cv.wait()
            self._status[rank] = _READY
            self._waiting[rank] = None
            msg = queue.popleft()
            if tag is not None and msg.tag != tag:
                raise InvalidArgumentError(
                    f"rank {rank} expected tag {tag!r} from rank {src}, got {msg.tag!r}"
                )
            if src != rank:
                self.ledger.record_recv(rank, msg.elements, msg.meta, msg.phase)
            return msg.payload

    def in_flight(self):
        """Elements enqueued between distinct ranks but not yet received."""
        with self._cv:
            return sum(
                m.elements
                for (s, d), q in self._queues.items()
                if s != d
                for m in q
            )

    # -- execution --

    def _worker(self, rank, program, results):
        try:
            with self._cv:
                if self.schedule == "sequential":
                    self._wait_turn(rank)
            results[rank] = program(RankContext(self, rank))
        except _Abort:
            pass
        except BaseException as exc:  # propagated by run()
            with self._cv:
                self._fail(exc)
        finally:
            with self._cv:
                self._status[rank] = _DONE
                if not self._abort:
                    if self.schedule == "sequential":
                        if self._turn == rank:
                            self._handoff(rank)
                    elif self._all_stuck():
                        self._deadlock()
                self._cv.notify_all()

    def run(self, program):
        results = [None] * self.size
        threads = [
            threading.Thread(
                target=self._worker, args=(r, program, results), name=f"rank-{r}", daemon=True
            )
            for r in range(self.size)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if self._error is not None:
            raise self._error
        return results


class RankContext:
    """The handle a rank worker uses to talk to its peers."""

    def __init__(self, comm, rank):
        self.comm = comm
        self.rank = rank

    @property
    def size(self):
        return self.comm.size

    def send(self, dest, payload, *, phase="default", tag=None, elements=None, meta=None):
        """Non-blocking send; the payload is copied at call time."""
        self.comm.send(self.rank, dest, payload, phase=phase, tag=tag, elements=elements, meta=meta)

    def recv(self, src, *, tag=None):
        """Block until the next message from ``src`` is available."""
        return self.comm.recv(self.rank, src, tag=tag)

    def __repr__(self):
        return f"RankContext(rank={self.rank}, size={self.size})"


def run_spmd(grid, program, *, ledger=None, schedule=None):
    """Run ``program(ctx)`` once per rank and return ``(results, ledger)``.

    ``grid`` is a :class:`ProcessGrid` or a rank count.  When ``ledger`` is
    given, traffic is added to it.
    """
    size = grid.size if isinstance(grid, ProcessGrid) else int(grid)
    comm = SimComm(size, ledger=ledger, schedule=schedule)
    results = comm.run(program)
    leftover = comm.in_flight()
    if leftover:
        raise DeadlockError(f"{leftover} elements still in flight after all ranks finished")
    return results, comm.ledger


def personalized_exchange(ctx, members, outgoing, *, phase, tag=None):
    """Bucketed all-to-all among ``members`` in ``len(members)`` steps.

    ``outgoing`` maps destination rank to a payload.  At step ``t`` the rank
    at position ``p`` sends to position ``p + t`` and receives from ``p - t``
    (step 0 is the self message, which is free).  Returns the list of
    received payloads in step order.
    """
    members = list(members)
    n = len(members)
    p = members.index(ctx.rank)
    received = []
    for t in range(n):
        dest = members[(p + t) % n]
        src = members[(p - t) % n]
        ctx.send(dest, outgoing.get(dest), phase=phase, tag=tag)
        received.append(ctx.recv(src, tag=tag))
    return received
