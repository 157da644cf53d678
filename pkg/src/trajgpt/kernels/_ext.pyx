# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementation of the hot kernels (see numpy_ref for contracts)."""

from cython cimport floating

import numpy as _np

NAME = "cython"


def scan_forward(floating[:, ::1] q, floating[:, ::1] k, floating[:, ::1] v,
                 floating[::1] gamma, floating[:, ::1] out,
                 floating[:, :, ::1] s_all):
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t d = q.shape[1]
    cdef Py_ssize_t i, a, b
    cdef floating g, acc
    for a in range(d):
        for b in range(d):
            s_all[0, a, b] = k[0, a] * v[0, b]
    for i in range(1, n):
        g = gamma[i]
        for a in range(d):
            for b in range(d):
                s_all[i, a, b] = g * s_all[i - 1, a, b] + k[i, a] * v[i, b]
    for i in range(n):
        for b in range(d):
            acc = 0
            for a in range(d):
                acc += q[i, a] * s_all[i, a, b]
            out[i, b] = acc


def scan_backward(floating[:, ::1] q, floating[:, ::1] k, floating[:, ::1] v,
                  floating[::1] gamma, floating[:, :, ::1] s_all,
                  floating[:, ::1] d_out, floating[:, ::1] dq,
                  floating[:, ::1] dk, floating[:, ::1] dv,
                  floating[::1] dgamma):
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t d = q.shape[1]
    cdef Py_ssize_t i, a, b
    cdef floating acc, g
    # g_acc is the adjoint of the state after absorbing step i's output term
    cdef floating[:, ::1] g_acc
    g_acc = _np.zeros((d, d), dtype=_np.asarray(q).dtype)
    for i in range(n - 1, -1, -1):
        for a in range(d):
            for b in range(d):
                g_acc[a, b] += q[i, a] * d_out[i, b]
        for a in range(d):
            acc = 0
            for b in range(d):
                acc += s_all[i, a, b] * d_out[i, b]
            dq[i, a] = acc
        for a in range(d):
            acc = 0
            for b in range(d):
                acc += g_acc[a, b] * v[i, b]
            dk[i, a] = acc
        for b in range(d):
            acc = 0
            for a in range(d):
                acc += k[i, a] * g_acc[a, b]
            dv[i, b] = acc
        if i > 0:
            acc = 0
            for a in range(d):
                for b in range(d):
                    acc += g_acc[a, b] * s_all[i - 1, a, b]
            dgamma[i] = acc
            g = gamma[i]
            for a in range(d):
                for b in range(d):
                    g_acc[a, b] *= g
        else:
            dgamma[0] = 0


def decay_forward(floating[::1] gamma, floating[:, ::1] d_mat):
    cdef Py_ssize_t n = gamma.shape[0]
    cdef Py_ssize_t i, m
    cdef floating acc
    for i in range(n):
        d_mat[i, i] = 1
        acc = 1
        for m in range(i - 1, -1, -1):
            acc = acc * gamma[m + 1]
            d_mat[i, m] = acc


def decay_backward(floating[::1] gamma, floating[:, ::1] d_mat,
                   floating[:, ::1] d_upstream, floating[::1] dgamma):
    cdef Py_ssize_t n = gamma.shape[0]
    cdef Py_ssize_t i, m
    cdef floating acc
    for m in range(n):
        dgamma[m] = 0
    for i in range(1, n):
        acc = d_upstream[i, 0]
        for m in range(i):
            dgamma[m + 1] += acc * d_mat[i, m + 1]
            acc = acc * gamma[m + 1] + d_upstream[i, m + 1]
