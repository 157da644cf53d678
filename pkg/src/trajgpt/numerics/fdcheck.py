"""Central finite-difference gradient oracle.

Independent of the tape: it only needs a parameters-to-scalar callable,
so it can certify any analytic gradient (tape-produced or otherwise).
"""

import numpy as np

from ..errors import ContractViolation


def central_difference(f, params, name, index, eps):
    """Fourth-order symmetric difference along one parameter coordinate.

    The five-point stencil keeps the rounding-noise floor low enough to
    resolve near-zero gradients against the 1e-8 damping term.
    """
    flat = params[name].reshape(-1)
    orig = flat[index]
    vals = []
    for h in (2 * eps, eps, -eps, -2 * eps):
        flat[index] = orig + h
        vals.append(float(f(params)))
    flat[index] = orig
    if not all(np.isfinite(v) for v in vals):
        raise ContractViolation("finite_diff_check: non-finite objective value")
    f2u, f1u, f1d, f2d = vals
    return (-f2u + 8.0 * f1u - 8.0 * f1d + f2d) / (12.0 * eps)


def finite_diff_check(f, params, grads, eps=1e-3):
    """Max relative error between ``grads`` and central differences of ``f``.

    ``params`` and ``grads`` are dicts of float64 arrays with matching
    keys/shapes; ``f(params) -> float`` is evaluated at coordinate-wise
    symmetric perturbations. Error per coordinate is
    |analytic - central| / (|central| + 1e-8).
    """
    worst = 0.0
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractViolation(f"finite_diff_check: {name} must be float64")
        gflat = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        for i in range(p.size):
            central = central_difference(f, params, name, i, eps)
            err = abs(gflat[i] - central) / (abs(central) + 1e-8)
            worst = max(worst, err)
    return worst
