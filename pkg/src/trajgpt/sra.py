"""Selective recurrent attention: gated state recurrence and its parallel form.

The per-head state update s_n = gamma_n * s_{n-1} + k_n^T v_n admits an
exactly equivalent parallel evaluation (Q K^T elementwise-weighted by a
causal decay matrix), which the test suite holds to 1e-10 in double
precision. Both forms share one projection path so they can never drift.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import ContractViolation
from .numerics import ops
from .numerics.tape import Node, Tape
from .positional import RopeConfig, rope_phases


@dataclass
class SRAParams:
    """Projection weights and gating parameters for one attention layer.

    w_gamma holds one decay vector per head as columns (d x heads).
    fixed_gamma, when set, replaces the data-dependent gate (ablation).
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_gamma: np.ndarray
    heads: int = 1
    tau: float = 20.0
    rope: Optional[RopeConfig] = None
    fixed_gamma: Optional[float] = None

    def __post_init__(self):
        d = self.w_q.shape[0]
        if self.w_q.shape != (d, d) or self.w_k.shape != (d, d) or self.w_v.shape != (d, d):
            raise ContractViolation("SRAParams: projection matrices must be square d x d")
        if d % self.heads != 0:
            raise ContractViolation(f"SRAParams: d={d} not divisible by heads={self.heads}")
        if self.w_gamma.shape != (d, self.heads):
            raise ContractViolation("SRAParams: w_gamma must have shape (d, heads)")
        if self.tau <= 0:
            raise ContractViolation("SRAParams: tau must be positive")
        if self.fixed_gamma is not None and not (0.0 < self.fixed_gamma <= 1.0):
            raise ContractViolation("SRAParams: fixed_gamma must lie in (0, 1]")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass
class SRAState:
    """Recurrent carrier for one head: state matrix plus last-step records."""

    s: np.ndarray
    last_time: float = -np.inf
    last_kv: np.ndarray = None
    last_gamma: float = 1.0

    def __post_init__(self):
        if self.last_kv is None:
            self.last_kv = np.zeros_like(self.s)

    def copy(self) -> "SRAState":
        return SRAState(self.s.copy(), self.last_time, self.last_kv.copy(),
                        self.last_gamma)


def init_state(head_dim: int, dtype=np.float64) -> SRAState:
    """Empty-history state: S_0 = 0."""
    return SRAState(np.zeros((head_dim, head_dim), dtype=dtype))


@dataclass
class DecaySchedule:
    """Per-token, per-head gates with their running products."""

    gammas: np.ndarray  # (heads, n)
    cumulative: np.ndarray = None

    def __post_init__(self):
        g = np.asarray(self.gammas)
        if g.ndim == 1:
            g = g[None, :]
        if np.any(g <= 0.0) or np.any(g > 1.0):
            raise ContractViolation("DecaySchedule: every gamma must lie in (0, 1]")
        self.gammas = g
        if self.cumulative is None:
            self.cumulative = np.cumprod(g, axis=1)

    def decay_matrix(self, head: int = 0) -> np.ndarray:
        return build_decay_matrix(self.gammas[head])


def compute_gamma(x_row, params: SRAParams, head: int) -> float:
    """Data-dependent gate for one token and head: sigma(x . w)^(1/tau)."""
    x_row = np.asarray(x_row)
    if x_row.shape != (params.d,):
        raise ContractViolation(f"compute_gamma: expected a length-{params.d} row")
    z = float(x_row @ params.w_gamma[:, head])
    return float(ops.sigmoid_pow_values(z, params.tau))


def gamma_schedule(x_rows, params: SRAParams) -> DecaySchedule:
    """Gates for a whole sequence, all heads."""
    x_rows = np.asarray(x_rows)
    if params.fixed_gamma is not None:
        g = np.full((params.heads, x_rows.shape[0]), params.fixed_gamma,
                    dtype=x_rows.dtype)
        return DecaySchedule(g)
    z = x_rows @ params.w_gamma  # (n, heads)
    return DecaySchedule(ops.sigmoid_pow_values(z, params.tau).T)


def build_decay_matrix(gammas) -> np.ndarray:
    """Causal decay matrix D[n, m] = prod(gamma[m+1 .. n]), unit diagonal.

    Computed by running products per row; never as a ratio of cumulative
    products, which underflows for long sequences. A zero gate is the
    full-cutoff limit and zeroes every product crossing it.
    """
    gammas = np.ascontiguousarray(gammas)
    if gammas.dtype not in (np.float32, np.float64):
        gammas = gammas.astype(np.float64)
    if gammas.ndim != 1 or gammas.shape[0] < 1:
        raise ContractViolation("build_decay_matrix: expected a non-empty gate vector")
    if np.any(gammas < 0.0) or np.any(gammas > 1.0):
        raise ContractViolation("build_decay_matrix: gates must lie in [0, 1]")
    return kernels.decay_matrix_forward(gammas)


def recurrent_step(state: SRAState, q_n, k_n, v_n, gamma_n: float, t=None):
    """One gated update: returns (new state, output row q_n @ s_new).

    gamma_n = 0 is accepted as the full-cutoff limit (history dropped);
    gates produced by the sigmoid path are always strictly positive.
    """
    q_n, k_n, v_n = np.asarray(q_n), np.asarray(k_n), np.asarray(v_n)
    if not (np.all(np.isfinite(q_n)) and np.all(np.isfinite(k_n))
            and np.all(np.isfinite(v_n)) and np.isfinite(gamma_n)):
        raise ContractViolation("recurrent_step: non-finite inputs")
    if not (0.0 <= gamma_n <= 1.0):
        raise ContractViolation("recurrent_step: gamma must lie in [0, 1]")
    kv = np.outer(k_n, v_n)
    s_new = gamma_n * state.s + kv
    o_n = q_n @ s_new
    new_time = state.last_time if t is None else float(t)
    if new_time < state.last_time:
        raise ContractViolation("recurrent_step: time must be non-decreasing")
    return SRAState(s_new, new_time, kv, float(gamma_n)), o_n


def project_heads(x: Node, times, params: SRAParams, weights=None):
    """Shared projection path: per-head (q, k, v, gamma) nodes.

    Queries arrive rotated to their timestamps and pre-scaled by
    1/sqrt(head_dim); keys are rotated, values untouched. ``weights``
    optionally supplies tape nodes for the parameter arrays (training);
    otherwise constants are built from ``params``.
    """
    tape = x.tape
    n = x.value.shape[0]
    if n == 0:
        raise ContractViolation("sra: empty sequence")
    if weights is None:
        weights = {
            "w_q": tape.leaf(params.w_q), "w_k": tape.leaf(params.w_k),
            "w_v": tape.leaf(params.w_v), "w_o": tape.leaf(params.w_o),
            "w_gamma": tape.leaf(params.w_gamma),
        }
    h = params.heads
    q_full = ops.matmul(x, weights["w_q"])
    k_full = ops.matmul(x, weights["w_k"])
    v_full = ops.matmul(x, weights["w_v"])
    q_heads = ops.split_cols(q_full, h)
    k_heads = ops.split_cols(k_full, h)
    v_heads = ops.split_cols(v_full, h)

    if params.fixed_gamma is not None:
        const = np.full(n, params.fixed_gamma, dtype=x.value.dtype)
        gammas = [tape.constant(const) for _ in range(h)]
    else:
        z = ops.matmul(x, weights["w_gamma"])  # (n, heads)
        gammas = [ops.reshape(col, (n,))
                  for col in ops.split_cols(z, h)]
        gammas = [ops.sigmoid_pow(g, params.tau) for g in gammas]

    if params.rope is not None:
        cos, sin = rope_phases(times, params.rope)
        q_heads = [ops.rope_rows(q, cos, sin) for q in q_heads]
        k_heads = [ops.rope_rows(k, cos, sin) for k in k_heads]
    inv = 1.0 / np.sqrt(params.head_dim)
    q_heads = [ops.scale(q, inv) for q in q_heads]
    return q_heads, k_heads, v_heads, gammas


def attention_nodes(x: Node, times, params: SRAParams, form: str = "parallel",
                    weights=None) -> Node:
    """Full multi-head SRA on tape nodes; heads concatenated then mixed."""
    if form not in ("parallel", "recurrent"):
        raise ContractViolation(f"sra: unknown form {form!r}")
    tape = x.tape
    if weights is None:
        weights = {
            "w_q": tape.leaf(params.w_q), "w_k": tape.leaf(params.w_k),
            "w_v": tape.leaf(params.w_v), "w_o": tape.leaf(params.w_o),
            "w_gamma": tape.leaf(params.w_gamma),
        }
    q_heads, k_heads, v_heads, gammas = project_heads(x, times, params, weights)
    outs = []
    for q, k, v, g in zip(q_heads, k_heads, v_heads, gammas):
        if form == "recurrent":
            outs.append(ops.sra_scan(q, k, v, g))
        else:
            d_mat = ops.decay_matrix(g)
            scores = ops.mul(ops.matmul(q, ops.transpose(k)), d_mat)
            outs.append(ops.matmul(scores, v))
    merged = outs[0] if len(outs) == 1 else ops.concat_cols(outs)
    return ops.matmul(merged, weights["w_o"])


def _forward_arrays(x_rows, times, params: SRAParams, form: str) -> np.ndarray:
    x_rows = np.asarray(x_rows)
    times = np.asarray(times, dtype=np.float64)
    if x_rows.ndim != 2 or x_rows.shape[0] == 0:
        raise ContractViolation("sra: expected a non-empty (n, d) input")
    if x_rows.shape[0] != times.shape[0]:
        raise ContractViolation("sra: x_rows and times must have equal length")
    tape = Tape(recording=False)
    return attention_nodes(tape.leaf(x_rows), times, params, form=form).value


def recurrent_forward(x_rows, times, params: SRAParams) -> np.ndarray:
    """Multi-head SRA evaluated by folding the recurrence over the sequence."""
    return _forward_arrays(x_rows, times, params, "recurrent")


def parallel_forward(x_rows, times, params: SRAParams) -> np.ndarray:
    """Multi-head SRA evaluated as (Q K^T elementwise D) V per head."""
    return _forward_arrays(x_rows, times, params, "parallel")


def multi_head_forward(x_rows, times, params: SRAParams,
                       form: str = "parallel") -> np.ndarray:
    """Form-dispatching alias for the multi-head module."""
    return _forward_arrays(x_rows, times, params, form)
