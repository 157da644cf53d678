"""Dense-matrix arithmetic, the differentiation tape, and gradient oracles."""

import numpy as np

from ..errors import ContractViolation
from . import ops
from .fdcheck import finite_diff_check
from .tape import DOUBLE, SINGLE, Node, Tape, check_matrix

__all__ = [
    "DOUBLE", "SINGLE", "Node", "Tape", "check_matrix", "finite_diff_check",
    "matmul", "ops", "sigmoid_pow",
]


def matmul(a, b):
    """Contract-checked dense matrix product on raw arrays."""
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ContractViolation(f"matmul: mixed precisions {a.dtype} vs {b.dtype}")
    return a @ b


def sigmoid_pow(z, tau):
    """sigma(z)^(1/tau) on raw arrays or scalars; tau must be positive."""
    if tau <= 0:
        raise ContractViolation("sigmoid_pow: tau must be positive")
    return ops.sigmoid_pow_values(z, tau)
