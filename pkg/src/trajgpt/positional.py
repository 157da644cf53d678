"""Rotary position embedding over real-valued timestamps.

Consecutive coordinate pairs of a query/key row are rotated by
angle_j * t with a geometric frequency schedule. Queries and keys are
rotated by the same sign; the conjugate factor on the key side appears
through the transpose in Q K^T, so every score depends on t_n - t_m only
(covered by the shift-invariance tests).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .numerics.ops import rotate_pairs_values


@dataclass(frozen=True)
class RopeConfig:
    """Frequency schedule: angle_j = time_scale * theta_base^(-2j/head_dim)."""

    head_dim: int
    theta_base: float = 10000.0
    time_scale: float = 1.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2 != 0:
            raise ContractViolation("RopeConfig: head_dim must be a positive even count")
        if self.theta_base <= 1.0:
            raise ContractViolation("RopeConfig: theta_base must exceed 1")
        if self.time_scale <= 0.0:
            raise ContractViolation("RopeConfig: time_scale must be positive")

    def angles(self) -> np.ndarray:
        j = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.time_scale * self.theta_base ** (-2.0 * j / self.head_dim)


def rope_phases(times, cfg: RopeConfig):
    """(cos, sin) tables for rotating each row to its timestamp."""
    times = np.asarray(times, dtype=np.float64)
    phase = times[:, None] * cfg.angles()[None, :]
    return np.cos(phase), np.sin(phase)


def rope_rotate(v, t, cfg: RopeConfig):
    """Rotate a single head_dim vector to timestamp ``t``."""
    v = np.asarray(v)
    if v.ndim != 1 or v.shape[0] != cfg.head_dim:
        raise ContractViolation(
            f"rope_rotate: expected a length-{cfg.head_dim} vector, got shape {v.shape}")
    cos, sin = rope_phases(np.asarray([t]), cfg)
    out = rotate_pairs_values(v[None, :], cos.astype(v.dtype), sin.astype(v.dtype))
    return out[0]


def rope_apply(q_rows, k_rows, times, cfg: RopeConfig):
    """Rotate query and key rows to their timestamps.

    Returns (rotated q_rows, rotated k_rows); inner products between the
    results depend on timestamp differences only.
    """
    q_rows, k_rows = np.asarray(q_rows), np.asarray(k_rows)
    times = np.asarray(times, dtype=np.float64)
    if not (q_rows.shape[0] == k_rows.shape[0] == times.shape[0]):
        raise ContractViolation("rope_apply: q_rows, k_rows, times must have equal length")
    cos, sin = rope_phases(times, cfg)
    cos = cos.astype(q_rows.dtype, copy=False)
    sin = sin.astype(q_rows.dtype, copy=False)
    return (rotate_pairs_values(q_rows, cos, sin),
            rotate_pairs_values(k_rows, cos, sin))


def sinusoidal_table(n_positions: int, d: int, base: float = 10000.0) -> np.ndarray:
    """Absolute position-index embedding table (the RoPE-ablation switch)."""
    if d % 2 != 0:
        raise ContractViolation("sinusoidal_table: d must be even")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    j = np.arange(d // 2, dtype=np.float64)[None, :]
    phase = pos * base ** (-2.0 * j / d)
    table = np.zeros((n_positions, d), dtype=np.float64)
    table[:, 0::2] = np.sin(phase)
    table[:, 1::2] = np.cos(phase)
    return table
