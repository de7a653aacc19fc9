"""Backend selection for the dual hinge kernels.

The compiled extension is used when it was built and importable; otherwise
the NumPy implementation is used. Set ``POOLEDWEIGHTS_PURE=1`` to force the
NumPy path.
"""

import os

import numpy as np

from . import _kernels_py as python_impl

compiled_impl = None
if not os.environ.get("POOLEDWEIGHTS_PURE"):
    try:
        from . import _kernels as compiled_impl  # type: ignore[no-redef]
    except ImportError:
        compiled_impl = None

_impl = compiled_impl if compiled_impl is not None else python_impl
BACKEND = "cython" if compiled_impl is not None else "python"


def hinge_terms(phi, offsets, alpha, beta, inv_lam):
    return _impl.hinge_terms(phi, offsets, alpha, beta, inv_lam)


def hinge_value(phi, offsets, alpha, beta, inv_lam):
    return _impl.hinge_value(phi, offsets, alpha, beta, inv_lam)


def prepare(phi, offsets, alpha, beta, inv_lam):
    """Coerce arguments to the contiguous float64/int64 layout both backends take."""
    return (
        np.ascontiguousarray(phi, dtype=np.float64),
        np.ascontiguousarray(offsets, dtype=np.int64),
        np.ascontiguousarray(alpha, dtype=np.float64),
        np.ascontiguousarray(beta, dtype=np.float64),
        np.ascontiguousarray(inv_lam, dtype=np.float64),
    )
