"""Shared gradient-check helpers for the test modules."""

import numpy as np

from mfmasc import tensor as T
from mfmasc.tensor import Tensor, finite_diff_check


def projected(fn, base=None, signed=False, seed=99, weights=None):
    """Scalarize a tensor-valued op as ``sum(r * (fn(...) - base))``.

    Subtracting the constant ``base`` (the output at the check point) leaves
    the gradient unchanged but keeps the scalar near zero, so binary32
    rounding of the final sum does not swamp the central differences.
    Weights have magnitude in [0.5, 1.5]; ``signed`` draws random signs.
    Explicit ``weights`` replace the random draw.
    """
    cache = {}

    def f(*args):
        out = fn(*args)
        if out.shape not in cache and weights is not None:
            cache[out.shape] = np.broadcast_to(weights, out.shape).astype(out.dtype)
        if out.shape not in cache:
            rng = np.random.default_rng(seed)
            r = rng.uniform(0.5, 1.5, out.shape)
            if signed:
                r *= rng.choice([-1.0, 1.0], out.shape)
            cache[out.shape] = r.astype(out.dtype)
        if base is not None:
            out = out - Tensor(base)
        return T.sum_(out * Tensor(cache[out.shape]))

    return f


def grad_errors(fn, arrays, eps=None, signed=False, weights=None):
    """Max relative finite-difference error for every argument of ``fn``."""
    base = fn(*[Tensor(a) for a in arrays]).data
    f = projected(fn, base, signed, weights=weights)
    errs = []
    for i in range(len(arrays)):

        def g(t, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = t
            return f(*args)

        errs.append(finite_diff_check(g, Tensor(arrays[i]), eps))
    return errs


def well_conditioned(rng, shape, dtype=np.float32, low=0.2, high=1.0):
    """Positive inputs for binary32 checks, where the elementwise relative
    error is only meaningful for gradients well away from zero."""
    return rng.uniform(low, high, shape).astype(dtype)
