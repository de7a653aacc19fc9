"""Block-arrow linear systems.

Hierarchical models here (dual of the balancing problem, interacted ridge and
logistic fits) share one Hessian shape: ``K`` independent per-stratum blocks
coupled only through a shared parameter vector::

    [ H_1            C_1 ] [d_1]   [r_1]
    [      ...       ... ] [...] = [...]
    [           H_K  C_K ] [d_K]   [r_K]
    [ C_1' ... C_K'  H_b ] [d_b]   [r_b]

Eliminating the blocks costs ``K q^3 + p^3`` instead of ``(Kq + p)^3``.
"""

from __future__ import annotations

import numpy as np


def solve_arrow(blocks, couplings, corner, rhs_blocks, rhs_corner):
    """Solve the arrow system; ``corner`` may be ``None`` for block-diagonal.

    Shapes: ``blocks (K, q, q)``, ``couplings (K, q, p)``, ``corner (p, p)``,
    ``rhs_blocks (K, q)``, ``rhs_corner (p,)``.
    """
    hinv_r = np.linalg.solve(blocks, rhs_blocks[..., None])[..., 0]
    if corner is None:
        return hinv_r, None
    hinv_c = np.linalg.solve(blocks, couplings)
    schur = corner - np.einsum("kqp,kqr->pr", couplings, hinv_c)
    rb = rhs_corner - np.einsum("kqp,kq->p", couplings, hinv_r)
    try:
        d_b = np.linalg.solve(schur, rb)
    except np.linalg.LinAlgError:
        d_b = np.linalg.lstsq(schur, rb, rcond=None)[0]
    d_g = hinv_r - np.einsum("kqp,p->kq", hinv_c, d_b)
    return d_g, d_b


def arrow_matvec(blocks, couplings, corner, x_blocks, x_corner):
    """Multiply the arrow matrix by ``(x_blocks, x_corner)``; used in tests."""
    top = np.einsum("kqr,kr->kq", blocks, x_blocks)
    if corner is None:
        return top, None
    top += np.einsum("kqp,p->kq", couplings, x_corner)
    bottom = corner @ x_corner + np.einsum("kqp,kq->p", couplings, x_blocks)
    return top, bottom
