"""NumPy implementation of the dual hinge kernels.

Controls are sorted by stratum; ``offsets[g]:offsets[g + 1]`` is the row
block of stratum ``g`` in ``phi``. For each row the truncated linear odds is
``u_i = alpha[g] + beta[g] . phi_i``.
"""

import numpy as np


def hinge_terms(phi, offsets, alpha, beta, inv_lam):
    """Value, gradients and linear predictors of the hinge-squared term.

    value = sum_g inv_lam[g] / 2 * sum_i [u_i]_+^2
    grad_alpha[g] = inv_lam[g] * sum_i [u_i]_+
    grad_beta[g] = inv_lam[g] * sum_i [u_i]_+ phi_i
    """
    K = alpha.shape[0]
    u = np.empty(phi.shape[0])
    grad_alpha = np.zeros(K)
    grad_beta = np.zeros((K, phi.shape[1]))
    value = 0.0
    for g in range(K):
        lo, hi = offsets[g], offsets[g + 1]
        block = phi[lo:hi]
        ug = block @ beta[g]
        ug += alpha[g]
        u[lo:hi] = ug
        pos = np.maximum(ug, 0.0)
        c = inv_lam[g]
        value += 0.5 * c * float(pos @ pos)
        grad_alpha[g] = c * pos.sum()
        grad_beta[g] = c * (pos @ block)
    return value, grad_alpha, grad_beta, u


def hinge_value(phi, offsets, alpha, beta, inv_lam):
    value = 0.0
    for g in range(alpha.shape[0]):
        lo, hi = offsets[g], offsets[g + 1]
        pos = np.maximum(phi[lo:hi] @ beta[g] + alpha[g], 0.0)
        value += 0.5 * inv_lam[g] * float(pos @ pos)
    return value
