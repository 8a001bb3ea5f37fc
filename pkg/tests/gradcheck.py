"""Central finite-difference oracle used across the test suite.

Kept independent of the autodiff engine on purpose: it only ever calls
the forward function, never the tape.
"""

import numpy as np


def finite_difference(f, x, h=1e-5):
    """Central-difference gradient of scalar-valued f at array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def assert_grad_matches(analytic, f, x, rtol=1e-4, h=1e-5, atol=1e-8):
    numeric = finite_difference(f, x, h=h)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)
