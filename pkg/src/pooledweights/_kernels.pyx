# Compiled counterpart of _kernels_py: one fused pass per stratum block.
import numpy as np
cimport numpy as cnp

cnp.import_array()


def hinge_terms(const double[:, ::1] phi, const cnp.int64_t[::1] offsets,
                const double[::1] alpha, const double[:, ::1] beta,
                const double[::1] inv_lam):
    cdef Py_ssize_t K = alpha.shape[0]
    cdef Py_ssize_t p = phi.shape[1]
    cdef Py_ssize_t g, i, j
    cdef double value = 0.0, s, c, acc, sq
    u = np.empty(phi.shape[0])
    grad_alpha = np.zeros(K)
    grad_beta = np.zeros((K, p))
    cdef double[::1] u_v = u
    cdef double[::1] ga = grad_alpha
    cdef double[:, ::1] gb = grad_beta
    with nogil:
        for g in range(K):
            c = inv_lam[g]
            acc = 0.0
            sq = 0.0
            for i in range(offsets[g], offsets[g + 1]):
                s = alpha[g]
                for j in range(p):
                    s = s + beta[g, j] * phi[i, j]
                u_v[i] = s
                if s > 0.0:
                    acc = acc + s
                    sq = sq + s * s
                    for j in range(p):
                        gb[g, j] = gb[g, j] + s * phi[i, j]
            for j in range(p):
                gb[g, j] = c * gb[g, j]
            ga[g] = c * acc
            value = value + 0.5 * c * sq
    return value, grad_alpha, grad_beta, u


def hinge_value(const double[:, ::1] phi, const cnp.int64_t[::1] offsets,
                const double[::1] alpha, const double[:, ::1] beta,
                const double[::1] inv_lam):
    cdef Py_ssize_t K = alpha.shape[0]
    cdef Py_ssize_t p = phi.shape[1]
    cdef Py_ssize_t g, i, j
    cdef double value = 0.0, s, sq
    with nogil:
        for g in range(K):
            sq = 0.0
            for i in range(offsets[g], offsets[g + 1]):
                s = alpha[g]
                for j in range(p):
                    s = s + beta[g, j] * phi[i, j]
                if s > 0.0:
                    sq = sq + s * s
            value = value + 0.5 * inv_lam[g] * sq
    return value
