"""Continuous-time view of the gated recurrence.

One attention step is the zero-order-hold discretization of a diagonal
linear ODE: lifting recovers the continuous parameters from a gate and a
key, discretizing inverts the lift exactly, and evolving the state over
an arbitrary time gap powers time-specific inference.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .numerics.tape import Tape
from .positional import RopeConfig, rope_rotate
from .sra import SRAParams, SRAState, project_heads

GAP_MODES = ("history_only", "full")


@dataclass
class ContinuousParams:
    """Diagonal continuous-time system (a, b, c) with its step size."""

    a: np.ndarray      # diagonal entries of the state matrix, all <= 0
    b: np.ndarray      # input column (lifted key), shape (head_dim, 1)
    c: np.ndarray      # output row (query)
    delta: float

    def __post_init__(self):
        if self.delta <= 0:
            raise ContractViolation("ContinuousParams: delta must be positive")
        if np.any(self.a > 0):
            raise ContractViolation("ContinuousParams: state diagonal must be <= 0")


def zoh_lift(gamma: float, k_row, q_row, delta: float) -> ContinuousParams:
    """Continuous parameters whose ZOH discretization is one SRA step.

    a = ln(gamma)/delta on the diagonal; b = a (e^{delta a} - 1)^{-1} k^T.
    At gamma = 1 the analytic limit b = k^T / delta applies.
    """
    if not 0.0 < gamma <= 1.0:
        raise ContractViolation("zoh_lift: gamma must lie in (0, 1]")
    if delta <= 0:
        raise ContractViolation("zoh_lift: delta must be positive")
    k_row = np.asarray(k_row, dtype=np.float64)
    q_row = np.asarray(q_row, dtype=np.float64)
    a_val = np.log(gamma) / delta
    if a_val == 0.0:
        factor = 1.0 / delta
    else:
        factor = a_val / np.expm1(delta * a_val)
    a = np.full(k_row.shape[0], a_val)
    b = factor * k_row[:, None]
    return ContinuousParams(a=a, b=b, c=q_row, delta=float(delta))


def zoh_discretize(cp: ContinuousParams):
    """Discrete (a_bar, b_bar): a_bar = e^{delta a}, b_bar = (e^{delta a}-1) a^{-1} b.

    The a -> 0 limit b_bar = delta * b is taken entrywise.
    """
    da = cp.delta * cp.a
    a_bar = np.exp(da)
    factor = np.where(cp.a == 0.0, cp.delta, np.expm1(da) / np.where(cp.a == 0.0, 1.0, cp.a))
    b_bar = factor[:, None] * cp.b
    return a_bar, b_bar


def gap_decay(state: SRAState, gamma: float, dt: float, mode: str = "history_only") -> SRAState:
    """Evolve a carried state over an observation-free gap of length dt.

    full: the whole state decays by gamma^dt. history_only: only the
    pre-observation history decays; the most recent k^T v enters
    undecayed (the literal reading of the update rule). Both agree at
    dt = 0 and whenever gamma = 1.
    """
    if dt < 0:
        raise ContractViolation("gap_decay: dt must be non-negative "
                                "(backward extrapolation runs on the reversed sequence)")
    if not 0.0 < gamma <= 1.0:
        raise ContractViolation("gap_decay: gamma must lie in (0, 1]")
    if mode not in GAP_MODES:
        raise ContractViolation(f"gap_decay: unknown mode {mode!r}")
    factor = gamma ** dt
    if mode == "full":
        s_new = factor * state.s
    else:
        s_new = factor * (state.s - state.last_kv) + state.last_kv
    return SRAState(s_new.astype(state.s.dtype, copy=False),
                    state.last_time + dt, state.last_kv.copy(), state.last_gamma)


def time_specific_output(states, last_x_row, params: SRAParams, t_target: float,
                         rope_cfg: RopeConfig = None, mode: str = "history_only"):
    """Attention output for a query at an arbitrary future timestamp.

    Builds per-head queries from the last observation's hidden row,
    rotates them to t_target, reads the gap-decayed states, and mixes
    heads through the output projection. States are not modified.
    """
    if isinstance(states, SRAState):
        states = [states]
    if len(states) != params.heads:
        raise ContractViolation("time_specific_output: one state per head required")
    last_time = states[0].last_time
    if t_target < last_time:
        raise ContractViolation("time_specific_output: target precedes the last observation")
    rope_cfg = rope_cfg if rope_cfg is not None else params.rope
    last_x_row = np.asarray(last_x_row)
    d_h = params.head_dim
    inv = 1.0 / np.sqrt(d_h)
    q_full = last_x_row @ params.w_q
    outs = []
    for h, st in enumerate(states):
        q = q_full[h * d_h:(h + 1) * d_h]
        if rope_cfg is not None:
            q = rope_rotate(q, t_target, rope_cfg)
        decayed = gap_decay(st, st.last_gamma, t_target - st.last_time, mode)
        outs.append((inv * q) @ decayed.s)
    return np.concatenate(outs) @ params.w_o


def ssm_unroll(x_rows, times, params: SRAParams) -> np.ndarray:
    """Drive the whole sequence through lift -> discretize -> SSM recursion.

    Uses the same projections as the attention forms (unit step when
    lifting, so the discrete system must reproduce the recurrence); the
    equivalence test pins this to the recurrent output at 1e-10.
    """
    x_rows = np.asarray(x_rows)
    times = np.asarray(times, dtype=np.float64)
    tape = Tape(recording=False)
    q_heads, k_heads, v_heads, gammas = project_heads(tape.leaf(x_rows), times, params)
    n = x_rows.shape[0]
    d_h = params.head_dim
    outs = []
    for q, k, v, g in zip(q_heads, k_heads, v_heads, gammas):
        qv, kv, vv, gv = q.value, k.value, v.value, g.value
        s = np.zeros((d_h, d_h), dtype=np.float64)
        o = np.empty((n, d_h), dtype=np.float64)
        for i in range(n):
            cp = zoh_lift(float(gv[i]), kv[i], qv[i], delta=1.0)
            a_bar, b_bar = zoh_discretize(cp)
            s = a_bar[:, None] * s + b_bar @ vv[i][None, :]
            o[i] = cp.c @ s
        outs.append(o)
    merged = np.concatenate(outs, axis=1)
    return (merged @ params.w_o).astype(x_rows.dtype, copy=False)
