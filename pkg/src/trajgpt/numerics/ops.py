"""Primitive tape operations with hand-derived vjps.

Every differentiable public operation here is covered by a central
finite-difference check in the test suite. Inputs are Nodes on a shared
tape; values are float32/float64 ndarrays whose dtype is preserved.
"""

import numpy as np

from .. import kernels
from ..errors import ContractViolation
from .tape import Node

SIGMOID_CLAMP = 50.0  # |z| beyond this saturates within machine epsilon


def _tape_of(*nodes):
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ContractViolation("operands belong to different tapes")
    return tape


def _same_dtype(a, b, op):
    if a.value.dtype != b.value.dtype:
        raise ContractViolation(f"{op}: mixed precisions {a.value.dtype} vs {b.value.dtype}")


def matmul(a: Node, b: Node) -> Node:
    """Matrix product with fixed accumulation per backend (BLAS)."""
    tape = _tape_of(a, b)
    _same_dtype(a, b, "matmul")
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ContractViolation(
            f"matmul: incompatible shapes {a.value.shape} x {b.value.shape}")
    av, bv = a.value, b.value
    out = av @ bv

    def vjp(g):
        return g @ bv.T, av.T @ g

    return tape.emit(out, (a, b), vjp)


def add(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    _same_dtype(a, b, "add")
    if a.value.shape != b.value.shape:
        raise ContractViolation(f"add: shape mismatch {a.value.shape} vs {b.value.shape}")
    return tape.emit(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    _same_dtype(a, b, "sub")
    return tape.emit(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    """Elementwise product (same shape)."""
    tape = _tape_of(a, b)
    _same_dtype(a, b, "mul")
    if a.value.shape != b.value.shape:
        raise ContractViolation(f"mul: shape mismatch {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    return tape.emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Node, c: float) -> Node:
    c = a.value.dtype.type(c)
    return a.tape.emit(a.value * c, (a,), lambda g: (g * c,))


def transpose(a: Node) -> Node:
    return a.tape.emit(a.value.T.copy(), (a,), lambda g: (g.T,))


def add_rowvec(x: Node, b: Node) -> Node:
    """Add a length-cols vector to every row (bias add)."""
    tape = _tape_of(x, b)
    if b.value.ndim != 1 or x.value.shape[1] != b.value.shape[0]:
        raise ContractViolation("add_rowvec: bias length must equal column count")
    return tape.emit(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)))


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    return a.tape.emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_all(a: Node) -> Node:
    shape, dt = a.value.shape, a.value.dtype
    return a.tape.emit(np.asarray(a.value.sum(), dtype=dt), (a,),
                       lambda g: (np.full(shape, g, dtype=dt),))


def slice_rows(a: Node, start: int, stop: int) -> Node:
    n = a.value.shape[0]

    def vjp(g):
        full = np.zeros_like(a.value)
        full[start:stop] = g
        return (full,)

    if not (0 <= start <= stop <= n):
        raise ContractViolation(f"slice_rows: [{start}:{stop}] out of range for {n} rows")
    return a.tape.emit(a.value[start:stop].copy(), (a,), vjp)


def split_cols(a: Node, parts: int):
    """Split columns into equal contiguous blocks (per-head views)."""
    n, d = a.value.shape
    if d % parts != 0:
        raise ContractViolation(f"split_cols: {d} columns not divisible by {parts}")
    w = d // parts
    out = []
    for i in range(parts):
        sl = slice(i * w, (i + 1) * w)

        def vjp(g, sl=sl):
            full = np.zeros_like(a.value)
            full[:, sl] = g
            return (full,)

        out.append(a.tape.emit(a.value[:, sl].copy(), (a,), vjp))
    return out


def concat_cols(parts) -> Node:
    tape = _tape_of(*parts)
    widths = [p.value.shape[1] for p in parts]
    edges = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

    return tape.emit(np.concatenate([p.value for p in parts], axis=1), tuple(parts), vjp)


def gather_rows(table: Node, ids) -> Node:
    """Embedding lookup; backward scatter-adds into the table."""
    ids = np.asarray(ids)

    def vjp(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids, g)
        return (full,)

    return table.tape.emit(table.value[ids], (table,), vjp)


def sigmoid_pow_values(z, tau: float):
    """sigma(z)^(1/tau) on raw arrays/scalars, clamped for overflow safety."""
    z = np.clip(z, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    # sigma(z)^(1/tau) = exp(-log1p(exp(-z)) / tau), stable on both tails
    return np.exp(-np.log1p(np.exp(-z)) / tau)


def sigmoid_pow(z: Node, tau: float) -> Node:
    """Tempered sigmoid gate sigma(z)^(1/tau), elementwise."""
    if tau <= 0:
        raise ContractViolation("sigmoid_pow: tau must be positive")
    zc = np.clip(z.value, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    out = sigmoid_pow_values(zc, tau)
    sig = 1.0 / (1.0 + np.exp(-zc))
    inner = np.abs(z.value) < SIGMOID_CLAMP  # clamp kills the gradient outside
    deriv = (out * (1.0 - sig) / tau) * inner
    return z.tape.emit(out.astype(z.value.dtype, copy=False), (z,),
                       lambda g: (g * deriv.astype(z.value.dtype, copy=False),))


def gelu(x: Node) -> Node:
    """Gaussian error linear unit (tanh approximation)."""
    xv = x.value
    dt = xv.dtype.type
    c, a3 = dt(np.sqrt(2.0 / np.pi)), dt(0.044715)
    u = c * (xv + a3 * xv ** 3)
    t = np.tanh(u)
    out = 0.5 * xv * (1.0 + t)

    def vjp(g):
        du = c * (1.0 + 3.0 * a3 * xv ** 2)
        dgelu = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t ** 2) * du
        return (g * dgelu,)

    return x.tape.emit(out, (x,), vjp)


def rms_norm(x: Node, gain: Node, eps: float = 1e-6) -> Node:
    """Row-wise root-mean-square normalization with learned gain."""
    tape = _tape_of(x, gain)
    xv, gv = x.value, gain.value
    d = xv.shape[1]
    ms = np.mean(xv * xv, axis=1, keepdims=True)
    r = np.sqrt(ms + eps)
    xn = xv / r
    out = xn * gv

    def vjp(g):
        dgain = (g * xn).sum(axis=0)
        gg = g * gv
        # d/dx of x/r with r = sqrt(mean(x^2)+eps)
        dx = gg / r - xv * ((gg * xv).sum(axis=1, keepdims=True) / (d * r ** 3))
        return dx.astype(xv.dtype, copy=False), dgain.astype(gv.dtype, copy=False)

    return tape.emit(out.astype(xv.dtype, copy=False), (x, gain), vjp)


def rotate_pairs_values(x, cos, sin):
    """Rotate consecutive column pairs of x by the given per-pair angles."""
    out = np.empty_like(x)
    x0, x1 = x[:, 0::2], x[:, 1::2]
    out[:, 0::2] = x0 * cos - x1 * sin
    out[:, 1::2] = x0 * sin + x1 * cos
    return out


def rope_rows(x: Node, cos, sin) -> Node:
    """Apply a fixed per-row pairwise rotation (rotary embedding step)."""
    xv = x.value
    if xv.shape[1] % 2 != 0:
        raise ContractViolation("rope_rows: head dimension must be even")
    cos = cos.astype(xv.dtype, copy=False)
    sin = sin.astype(xv.dtype, copy=False)
    out = rotate_pairs_values(xv, cos, sin)
    # Rotations are orthogonal: the vjp is the inverse rotation of the gradient.
    return x.tape.emit(out, (x,), lambda g: (rotate_pairs_values(g, cos, -sin),))


def sra_scan(q: Node, k: Node, v: Node, gamma: Node) -> Node:
    """Recurrent gated-state attention scan for one head (kernel-backed)."""
    tape = _tape_of(q, k, v, gamma)
    qv, kv, vv, gv = q.value, k.value, v.value, gamma.value
    out, s_all = kernels.sra_scan_forward(qv, kv, vv, gv)

    def vjp(g):
        return kernels.sra_scan_backward(qv, kv, vv, gv, s_all, g)

    return tape.emit(out, (q, k, v, gamma), vjp)


def decay_matrix(gamma: Node) -> Node:
    """Causal decay matrix from per-token gates (kernel-backed)."""
    gv = gamma.value
    d_mat = kernels.decay_matrix_forward(gv)

    def vjp(g):
        return (kernels.decay_matrix_backward(gv, d_mat, g),)

    return gamma.tape.emit(d_mat, (gamma,), vjp)


_UPPER_MASKS = {}


def _upper_mask(n: int) -> np.ndarray:
    if n not in _UPPER_MASKS:
        _UPPER_MASKS[n] = np.triu(np.ones((n, n), dtype=bool), k=1)
    return _UPPER_MASKS[n]


def causal_softmax(scores: Node) -> Node:
    """Row-wise softmax over the causal (lower-triangular) support.

    Works on one buffer in place to keep the memory footprint at a
    single n x n temporary (this op sits on the quadratic hot path).
    """
    sv = scores.value
    n = sv.shape[0]
    y = sv.copy()
    y[_upper_mask(n)] = -np.inf
    y -= y.max(axis=1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=1, keepdims=True)

    def vjp(g):
        out = g - (g * y).sum(axis=1, keepdims=True)
        out *= y
        return (out,)

    return scores.tape.emit(y, (scores,), vjp)


def cross_entropy_sum(logits: Node, targets, mask=None):
    """Summed token cross-entropy; returns (scalar node, included count).

    ``targets`` are class ids per row; rows where ``mask`` is False are
    excluded from both the sum and the count.
    """
    lv = logits.value
    targets = np.asarray(targets)
    if targets.shape[0] != lv.shape[0]:
        raise ContractViolation(
            f"cross_entropy: {lv.shape[0]} logit rows vs {targets.shape[0]} targets")
    if mask is None:
        mask = np.ones(targets.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    m = lv.max(axis=1, keepdims=True)
    sh = lv - m
    lse = np.log(np.exp(sh).sum(axis=1, keepdims=True))
    logp = sh - lse
    rows = np.arange(lv.shape[0])
    losses = -logp[rows, targets]
    total = np.asarray((losses * mask).sum(), dtype=lv.dtype)
    count = int(mask.sum())

    def vjp(g):
        probs = np.exp(logp)
        probs[rows, targets] -= 1.0
        probs *= mask[:, None]
        return (probs.astype(lv.dtype, copy=False) * g,)

    return logits.tape.emit(total, (logits,), vjp), count
