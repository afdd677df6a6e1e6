"""Shared fixtures and the central-difference gradient harness.

Gradient checks run in float64 so that formula errors are not masked by
float32 rounding. `fd_grad` perturbs one coordinate at a time with a
central difference; `assert_grad_close` applies the 1e-3 relative
tolerance used across the suite.
"""

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_grad(f, x, step=1e-3):
    """Central finite-difference gradient of scalar f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-3, atol=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    tol = atol + rtol * np.abs(numeric)
    worst = np.argmax(diff - tol)
    assert np.all(diff <= tol), (
        f"gradient mismatch at flat index {worst}: "
        f"analytic={analytic.reshape(-1)[worst]}, numeric={numeric.reshape(-1)[worst]}"
    )
