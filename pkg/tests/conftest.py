import numpy as np


def central_diff_gradient(fun, eta, base_step=1e-6):
    """Central finite differences with the step scaled by |coordinate| + 1."""
    eta = np.asarray(eta, dtype=float)
    grad = np.zeros_like(eta)
    for i in range(eta.size):
        step = base_step * (abs(eta[i]) + 1.0)
        hi = eta.copy()
        lo = eta.copy()
        hi[i] += step
        lo[i] -= step
        grad[i] = (fun(hi) - fun(lo)) / (2.0 * step)
    return grad
