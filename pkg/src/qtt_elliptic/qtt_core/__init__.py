from .construct import (
    affine,
    constant,
    cumulative_sum_matrix,
    green_matrix,
    identity,
    index_below,
    ones,
    ones_matrix,
    polynomial,
    shift_matrix,
    sinusoid,
    step_function,
    unit_vector,
    upper_mask,
    zeros,
)
from .tensor import (
    DENSE_MAX_LEVEL,
    DenseGuardError,
    LevelMismatchError,
    QttMatrix,
    QttVector,
    Tol,
    TruncationTolerance,
    add,
    as_tolerance,
    average_rank,
    diag,
    diagonal,
    dot,
    fold,
    fold_matrix,
    hadamard,
    inner,
    linear_combination,
    matmul,
    matvec,
    norm2,
    outer,
    round_qtt,
    scale,
    storage,
    unfold,
)

__all__ = [name for name in dir() if not name.startswith("_") and name not in ("construct", "tensor")]
