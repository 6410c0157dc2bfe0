"""Central finite-difference verification of analytic gradients.

All checks run in float64: perturbations of 1e-4 leave roughly eight
significant digits of headroom, so a healthy operation lands many orders
of magnitude below the 1e-4 acceptance threshold.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor

DEFAULT_STEP = 1e-4
DEFAULT_TOL = 1e-4


def numerical_gradient(f, arrays, index, step=DEFAULT_STEP):
    """Central-difference gradient of scalar ``f(*arrays)`` w.r.t. one array."""
    x = arrays[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(*arrays))
        flat[i] = orig - step
        lo = float(f(*arrays))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic, numeric):
    """max |a - n| / max(|a|, |n|, 1); the unit floor turns near-zero
    gradients into an absolute comparison."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_op(f, arrays, step=DEFAULT_STEP, tol=DEFAULT_TOL):
    """Compare tape gradients of scalar ``f`` against central differences.

    ``f`` maps float64 numpy arrays to a scalar and must route its
    computation through engine ops when handed Tensors. Returns the worst
    relative error across all inputs.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*tensors)
    tape.backward(out)

    def f_np(*arrs):
        res = f(*[Tensor(a) for a in arrs])
        return res.item()

    worst = 0.0
    for i, t in enumerate(tensors):
        numeric = numerical_gradient(f_np, arrays, i, step=step)
        analytic = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def check_many(f, make_arrays, instances=5, seed=0, step=DEFAULT_STEP, tol=DEFAULT_TOL):
    """Run ``check_op`` on ``instances`` random draws; returns max error."""
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng(seed + i)
        worst = max(worst, check_op(f, make_arrays(rng), step=step, tol=tol))
    return worst
