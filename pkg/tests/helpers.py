"""Shared test utilities: finite differences and margin-aware sampling."""

import numpy as np


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max |a - n| / max(|a|, |n|, floor) over all entries.

    The floor is raised to 1e-4 of the largest gradient magnitude so that
    finite-difference roundoff noise (~1e-10) on structurally zero entries is
    not misread as relative error.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    floor = max(floor, 1e-4 * scale)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def away_from(values: np.ndarray, points, margin: float = 1e-3) -> bool:
    """True if every value is at least ``margin`` away from every point."""
    values = np.asarray(values)
    for p in np.atleast_1d(points):
        if np.any(np.abs(values - p) < margin):
            return False
    return True


def away_from_integers(values: np.ndarray, margin: float = 1e-3) -> bool:
    frac = np.abs(values - np.round(values))
    return bool(np.all(frac >= margin))


def nudge_from_integers(values: np.ndarray, margin: float = 2e-3) -> np.ndarray:
    """Push values whose fractional part is near 0 off the integer lattice."""
    values = np.asarray(values, dtype=np.float64).copy()
    frac = values - np.round(values)
    near = np.abs(frac) < margin
    values[near] += np.where(frac[near] >= 0, margin, -margin) * 2
    return values
