"""Central finite-difference oracle used by the gradient tests.

Independent of the autodiff backward pass: it only re-runs forward
evaluations with perturbed inputs.
"""

import numpy as np


def central_diff(f, x, h=1e-5):
    """d f / d x elementwise, where f() reads x (mutated in place)."""
    x = np.asarray(x)
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def central_diff_sample(f, x, indices, h=1e-5):
    """Like central_diff but only at the given flat indices."""
    x = np.asarray(x)
    flat = x.reshape(-1)
    out = np.zeros(len(indices), dtype=np.float64)
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out


def rel_err(analytic, numeric):
    """Max elementwise |a - n| / max(1, |a|, |n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
