"""Independent reference implementations used only by the tests.

Nothing here imports the solver internals: the primal oracle works directly
on the weights, the SBW oracle goes through a generic conic solver and the
spline oracle is a scalar loop over the textbook formula.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


def project_simplex(v: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection onto ``{x >= 0, sum x = total}`` (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def primal_oracle(phi, w, strata, lam_g, pooling="partial", outer=400, inner=4000, rho=10.0):
    """Minimize the primal balancing objective over the weights directly.

    Augmented Lagrangian on the global-balance equality; each inner problem is
    solved by accelerated projected gradient (FISTA with restarts) over the
    product of scaled simplices. Returns weights ordered like the controls
    in ``phi[~w]``.
    """
    phi = np.asarray(phi, float)
    w = np.asarray(w, bool)
    strata = np.asarray(strata)
    Pc, sc = phi[~w], strata[~w]
    K = int(strata.max()) + 1
    n1g = np.bincount(strata[w], minlength=K).astype(float)
    S = np.zeros((K, phi.shape[1]))
    np.add.at(S, strata[w], phi[w])
    lam_i = np.asarray(lam_g, float)[sc]
    local = pooling != "full"
    glob = pooling != "none"
    target = S.sum(axis=0)

    def grad_f(g, y):
        out = lam_i * g
        if local:
            E = -S.copy()
            np.add.at(E, sc, g[:, None] * Pc)
            out = out + np.einsum("ij,ij->i", Pc, E[sc])
        if glob:
            r = Pc.T @ g - target
            out = out + Pc @ (y + rho * r)
        return out

    def project(v):
        out = np.empty_like(v)
        for k in range(K):
            m = sc == k
            out[m] = project_simplex(v[m], n1g[k])
        return out

    # Lipschitz bound of the inner gradient
    H = np.diag(lam_i)
    if local:
        H = H + (Pc @ Pc.T) * (sc[:, None] == sc[None, :])
    if glob:
        H = H + rho * Pc @ Pc.T
    L = float(np.linalg.eigvalsh(H).max())
    g = project(np.zeros(Pc.shape[0]))
    y = np.zeros(phi.shape[1])
    for _ in range(outer):
        z, prev, t = g.copy(), g.copy(), 1.0
        for _ in range(inner):
            g_new = project(z - grad_f(z, y) / L)
            if np.max(np.abs(g_new - prev)) < 1e-15:
                prev = g_new
                break
            t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
            mom = (t - 1) / t_new
            if np.dot(g_new - prev, z - g_new) > 0:  # gradient restart
                t_new, mom = 1.0, 0.0
            z = g_new + mom * (g_new - prev)
            prev, t = g_new, t_new
        g = prev
        if not glob:
            break
        r = Pc.T @ g - target
        y = y + rho * r
        if np.max(np.abs(r)) < 1e-11:
            break
    return g


def sbw_oracle(phi, w, strata, lam_g):
    """Minimum weighted-variance weights with exact global and fine balance (cvxpy)."""
    import cvxpy as cp

    phi = np.asarray(phi, float)
    w = np.asarray(w, bool)
    strata = np.asarray(strata)
    Pc, sc = phi[~w], strata[~w]
    K = int(strata.max()) + 1
    n1g = np.bincount(strata[w], minlength=K)
    gamma = cp.Variable(Pc.shape[0])
    lam_i = np.asarray(lam_g, float)[sc]
    cons = [gamma >= 0, Pc.T @ gamma == phi[w].sum(axis=0)]
    for k in range(K):
        cons.append(cp.sum(gamma[sc == k]) == n1g[k])
    prob = cp.Problem(cp.Minimize(0.5 * cp.sum(cp.multiply(lam_i, cp.square(gamma)))), cons)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return np.asarray(gamma.value).ravel()


def natural_spline_oracle(x, knots):
    """Truncated-power natural cubic spline basis, one scalar at a time.

    Columns: ``x`` then ``d_k(x) - d_{K-1}(x)`` for ``k = 1..K-2`` with
    ``d_k(x) = ((x - t_k)_+^3 - (x - t_K)_+^3) / (t_K - t_k)``.
    """
    knots = [float(t) for t in knots]
    K = len(knots)
    rows = []
    for xi in x:
        xi = float(xi)

        def pos3(v):
            return v**3 if v > 0 else 0.0

        def d(k):
            return (pos3(xi - knots[k]) - pos3(xi - knots[K - 1])) / (knots[K - 1] - knots[k])

        row = [xi]
        for k in range(K - 2):
            row.append(d(k) - d(K - 2))
        rows.append(row)
    return np.array(rows)


def ratio_extremes_bruteforce(gamma, y, lam):
    """Min and max of ``sum g c y / sum g c`` over all corners ``c in {1/lam, lam}^n``."""
    gamma = np.asarray(gamma, float)
    y = np.asarray(y, float)
    lo, hi = math.inf, -math.inf
    for corner in itertools.product((1.0 / lam, lam), repeat=gamma.size):
        c = np.array(corner)
        val = float(np.sum(gamma * c * y) / np.sum(gamma * c))
        lo, hi = min(lo, val), max(hi, val)
    return lo, hi


def ess_streaming(weights):
    """Kish ESS accumulated one weight at a time in exact rational arithmetic."""
    s = q = Fraction(0)
    for v in weights:
        f = Fraction(float(v))
        s += f
        q += f * f
    return float(s * s / q)
