"""Central finite-difference oracle, kept independent of the tape machinery."""

import numpy as np

STEP = 1e-4
REL_TOL = 1e-4
ABS_FLOOR = 1e-7


def numeric_grad(f, arrays, step=STEP):
    """d f / d a for each array in ``arrays``; ``f`` maps arrays to a float."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = f(*arrays)
            flat[k] = orig - step
            down = f(*arrays)
            flat[k] = orig
            gflat[k] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=ABS_FLOOR):
    """Largest relative error, ignoring entries whose absolute error is under ``floor``."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(err <= floor, 0.0, err / np.maximum(scale, 1e-300))
    return float(rel.max()) if rel.size else 0.0
