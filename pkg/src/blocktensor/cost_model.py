"""Closed-form per-process communication volumes (in matrix elements).

``S_A = O_A*M*K``, ``S_B = O_B*K*N`` and ``S_C = O_C*M*N`` are the stored
element counts of the operands and the result.

===========  ===========================================
algorithm    elements communicated by each process
===========  ===========================================
cannon       ``(S_A + S_B) / sqrt(P)``
case1        ``(S_A + S_B) / P + S_C``     (reduce partial C)
case2        ``(S_A + S_B + S_C) / P + S_B``  (circulate B only)
===========  ===========================================
"""

import math
from dataclasses import dataclass, replace

from .errors import InvalidArgumentError

__all__ = [
    "MultiplySpec",
    "cannon_volume",
    "case1_volume",
    "case2_volume",
    "predicted_volumes",
    "occupancy_limit_case1",
    "occupancy_limit_case1_raw",
    "occupancy_ratio_bound",
    "estimate_result_occupancy",
    "ALGORITHMS",
]

ALGORITHMS = ("cannon", "case1", "case2")


@dataclass(frozen=True)
class MultiplySpec:
    M: int
    N: int
    K: int
    O_A: float = 1.0
    O_B: float = 1.0
    O_C: float = 1.0
    P: int = 1

    def __post_init__(self):
        if min(self.M, self.N, self.K) < 1:
            raise InvalidArgumentError("matrix dimensions must be >= 1")
        if self.P < 1:
            raise InvalidArgumentError("P must be >= 1")
        for name in ("O_A", "O_B", "O_C"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidArgumentError(f"{name}={value} outside [0, 1]")

    @property
    def S_A(self):
        return self.O_A * self.M * self.K

    @property
    def S_B(self):
        return self.O_B * self.K * self.N

    @property
    def S_C(self):
        return self.O_C * self.M * self.N

    @property
    def R(self):
        """``S_C / (S_A + S_B)``."""
        return self.S_C / (self.S_A + self.S_B)

    def with_occupancy_c(self, o_c):
        return replace(self, O_C=o_c)


def cannon_volume(spec):
    return spec.K * (spec.O_A * spec.M + spec.O_B * spec.N) / math.sqrt(spec.P)


def case1_volume(spec):
    return (spec.S_A + spec.S_B) / spec.P + spec.S_C


def case2_volume(spec):
    return (spec.S_A + spec.S_B + spec.S_C) / spec.P + spec.S_B


def predicted_volumes(spec):
    return {
        "cannon": cannon_volume(spec),
        "case1": case1_volume(spec),
        "case2": case2_volume(spec),
    }


def occupancy_limit_case1(spec):
    """Largest result occupancy for which case1 moves less data than Cannon.

    ``spec.O_C`` is ignored.  The value is clamped to ``[0, 1]``: 0 means
    case1 never wins, 1 means it wins for any result occupancy.
    """
    return min(max(occupancy_limit_case1_raw(spec), 0.0), 1.0)


def occupancy_limit_case1_raw(spec):
    """Unclamped form of :func:`occupancy_limit_case1`."""
    return (cannon_volume(spec) - (spec.S_A + spec.S_B) / spec.P) / (spec.M * spec.N)


def occupancy_ratio_bound(M, N, K, P):
    """Bound on ``O_C / O`` for equal operand occupancies, redistribution ignored."""
    return K * (M + N) / (M * N * math.sqrt(P))


def estimate_result_occupancy(spec, n_blocks_k):
    """Fill-in estimate for a block-sparse product.

    A result block stays empty only if none of the ``n_blocks_k`` pairs
    along the contracted dimension is present, each independently with
    probability ``O_A * O_B``.  This is an approximation used for algorithm
    selection only.
    """
    if n_blocks_k < 0:
        raise InvalidArgumentError("n_blocks_k must be >= 0")
    p = spec.O_A * spec.O_B
    return min(max(1.0 - (1.0 - p) ** n_blocks_k, 0.0), 1.0)
