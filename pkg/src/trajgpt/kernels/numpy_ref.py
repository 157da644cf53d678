"""Pure-numpy reference implementation of the hot kernels.

Used as the import-time fallback when the compiled extension is missing,
and as the comparison target for the backend benchmark. All functions
fill caller-allocated output arrays and mirror the extension signatures.
"""

import numpy as np

NAME = "numpy"


def scan_forward(q, k, v, gamma, out, s_all):
    """Gated state scan: s_i = gamma_i * s_{i-1} + outer(k_i, v_i), o_i = q_i @ s_i.

    Stores every intermediate state in ``s_all`` (needed by the backward
    pass and cheap at head_dim scale).
    """
    n = q.shape[0]
    np.outer(k[0], v[0], out=s_all[0])
    for i in range(1, n):
        np.multiply(s_all[i - 1], gamma[i], out=s_all[i])
        s_all[i] += np.outer(k[i], v[i])
    np.einsum("nd,nde->ne", q, s_all, out=out)


def scan_backward(q, k, v, gamma, s_all, d_out, dq, dk, dv, dgamma):
    """Reverse-mode pass of scan_forward.

    The adjoint of the running state is carried backwards: at step i it
    first absorbs q_i^T d_o_i, yields the local gradients, then shrinks
    by gamma_i on its way to step i-1.
    """
    n, d = q.shape
    g_acc = np.zeros((d, d), dtype=q.dtype)
    for i in range(n - 1, -1, -1):
        g_acc += np.outer(q[i], d_out[i])
        dq[i] = s_all[i] @ d_out[i]
        dk[i] = g_acc @ v[i]
        dv[i] = k[i] @ g_acc
        if i > 0:
            dgamma[i] = np.sum(g_acc * s_all[i - 1])
            g_acc *= gamma[i]
        else:
            dgamma[0] = 0.0


def decay_forward(gamma, d_mat):
    """Causal decay matrix: d_mat[i, m] = prod(gamma[m+1 .. i]) for m <= i.

    Built per row as a running product from the unit diagonal, never as a
    ratio of cumulative products (which underflows on long sequences).
    ``d_mat`` must arrive zero-initialized.
    """
    n = gamma.shape[0]
    d_mat[0, 0] = 1.0
    for i in range(1, n):
        row = np.cumprod(np.concatenate(([gamma.dtype.type(1.0)], gamma[i:0:-1])))
        d_mat[i, i::-1] = row


def decay_backward(gamma, d_mat, d_upstream, dgamma):
    """Gradient of decay_forward w.r.t. gamma.

    Walks columns left to right carrying the per-row adjoint of the row
    scan; O(n^2) total with one python-level step per column.
    """
    n = gamma.shape[0]
    dgamma[:] = 0.0
    if n < 2:
        return
    d_low = np.tril(d_upstream)
    acc = d_low[:, 0].copy()
    for m in range(n - 1):
        dgamma[m + 1] = acc @ d_mat[:, m + 1]
        acc *= gamma[m + 1]
        acc += d_low[:, m + 1]
