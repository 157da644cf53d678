"""Hot-loop kernels with a compiled core and a pure-numpy fallback.

The compiled extension is preferred when importable; set the environment
variable ``TRAJGPT_PURE_PYTHON=1`` to force the fallback (used by the
backend-comparison benchmark and the cross-backend tests).
"""

import os

import numpy as np

from . import numpy_ref

if os.environ.get("TRAJGPT_PURE_PYTHON") == "1":
    _impl = numpy_ref
else:
    try:
        from . import _ext as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = numpy_ref


def backend_name() -> str:
    return _impl.NAME


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython'/'numpy'/None=active)."""
    if name is None:
        return _impl
    if name == "numpy":
        return numpy_ref
    if name == "cython":
        from . import _ext  # raises ImportError if not built

        return _ext
    raise ValueError(f"unknown kernel backend: {name!r}")


def _contig(a):
    return np.ascontiguousarray(a)


def sra_scan_forward(q, k, v, gamma, impl=None):
    """Run the gated scan over one head; returns (outputs, all states)."""
    impl = impl or _impl
    q, k, v = _contig(q), _contig(k), _contig(v)
    gamma = _contig(gamma)
    n, d = q.shape
    out = np.empty((n, d), dtype=q.dtype)
    s_all = np.empty((n, d, d), dtype=q.dtype)
    impl.scan_forward(q, k, v, gamma, out, s_all)
    return out, s_all


def sra_scan_backward(q, k, v, gamma, s_all, d_out, impl=None):
    impl = impl or _impl
    q, k, v = _contig(q), _contig(k), _contig(v)
    gamma, d_out = _contig(gamma), _contig(d_out)
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    dgamma = np.empty_like(gamma)
    impl.scan_backward(q, k, v, gamma, s_all, d_out, dq, dk, dv, dgamma)
    return dq, dk, dv, dgamma


def decay_matrix_forward(gamma, impl=None):
    impl = impl or _impl
    gamma = _contig(gamma)
    n = gamma.shape[0]
    d_mat = np.zeros((n, n), dtype=gamma.dtype)
    impl.decay_forward(gamma, d_mat)
    return d_mat


def decay_matrix_backward(gamma, d_mat, d_upstream, impl=None):
    impl = impl or _impl
    gamma, d_upstream = _contig(gamma), _contig(d_upstream)
    dgamma = np.empty_like(gamma)
    impl.decay_backward(gamma, _contig(d_mat), d_upstream, dgamma)
    return dgamma
