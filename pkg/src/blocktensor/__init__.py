"""Block-sparse matrices and tensors on a simulated process grid.

The package counts every element sent between simulated ranks so measured
communication can be compared with closed-form volume models.
"""

from .blocks import Blocking, block_gemm_acc, order_batches, transpose_block
from .cost_model import (
    MultiplySpec,
    cannon_volume,
    case1_volume,
    case2_volume,
    estimate_result_occupancy,
    occupancy_limit_case1,
    occupancy_ratio_bound,
)
from .errors import (
    BlockTensorError,
    DeadlockError,
    InvalidArgumentError,
    LayoutError,
    OwnershipError,
    UnsupportedGridError,
)
from .grid_comm import Ledger, ProcessGrid, create_grid, run_spmd, split_grid
from .matrix import DistMatrix, new_matrix, random_matrix, redistribute, to_dense, transpose
from .mult_cannon import multiply_cannon
from .mult_rect import multiply, multiply_reduce_case1, multiply_virtual_case2, select_algorithm
from .tall_skinny import IndexFuncs, TallSkinnyMatrix, choose_split_factor, multiply_tall_skinny
from .tensor import ContractionSpec, SparseTensor, contract

__version__ = "0.1.0"
