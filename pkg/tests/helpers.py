"""Shared test utilities: finite differencing and error metrics.

Kept deliberately independent of the package's own oracle module so the
autodiff tests are not checked against the code they validate.
"""

import numpy as np


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    return float(np.linalg.norm(a - b)) / max(float(np.linalg.norm(b)), 1e-12)


def fd_grad(fun, x, eps=1e-6):
    """Central differences of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        up = float(fun(x))
        flat[i] = saved - eps
        down = float(fun(x))
        flat[i] = saved
        gf[i] = (up - down) / (2.0 * eps)
    return g


class FakeRng:
    """Plays back scripted draws for deterministic sampling tests."""

    def __init__(self, uniforms=(), integers=()):
        self._uniforms = list(uniforms)
        self._integers = list(integers)

    def random(self, size=None):
        if size is None:
            return self._uniforms.pop(0)
        return np.array([self._uniforms.pop(0) for _ in range(int(size))])

    def integers(self, low, high=None, size=None):
        if size is None:
            return self._integers.pop(0)
        return np.array([self._integers.pop(0) for _ in range(int(size))])
