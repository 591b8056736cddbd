# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled registration hot kernels (see _numpy.py for the reference semantics)."""

import numpy as np
cimport numpy as cnp

BACKEND = "cython"


cdef inline void _inv3_sym(const double* c, double* o) nogil:
    # Inverse of a symmetric 3x3 via the adjugate; caller guarantees SPD input.
    cdef double a00 = c[0], a01 = c[1], a02 = c[2]
    cdef double a11 = c[4], a12 = c[5], a22 = c[8]
    cdef double m00 = a11 * a22 - a12 * a12
    cdef double m01 = a02 * a12 - a01 * a22
    cdef double m02 = a01 * a12 - a02 * a11
    cdef double det = a00 * m00 + a01 * m01 + a02 * m02
    cdef double inv_det = 1.0 / det
    o[0] = m00 * inv_det
    o[1] = m01 * inv_det
    o[2] = m02 * inv_det
    o[3] = o[1]
    o[4] = (a00 * a22 - a02 * a02) * inv_det
    o[5] = (a02 * a01 - a00 * a12) * inv_det
    o[6] = o[2]
    o[7] = o[5]
    o[8] = (a00 * a11 - a01 * a01) * inv_det


def gicp_reduce(cnp.ndarray[cnp.float64_t, ndim=2] d,
                cnp.ndarray[cnp.float64_t, ndim=3] J,
                cnp.ndarray[cnp.float64_t, ndim=3] C):
    cdef Py_ssize_t m = d.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] H = np.zeros((6, 6))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] b = np.zeros(6)
    cdef double[:, ::1] dv = np.ascontiguousarray(d)
    cdef double[:, :, ::1] Jv = np.ascontiguousarray(J)
    cdef double[:, :, ::1] Cv = np.ascontiguousarray(C)
    cdef double[:, ::1] Hv = H
    cdef double[::1] bv = b
    cdef double cost = 0.0
    cdef double omega[9]
    cdef double od[3]
    cdef double oj[18]
    cdef Py_ssize_t i, a, r, s
    with nogil:
        for i in range(m):
            _inv3_sym(&Cv[i, 0, 0], omega)
            for a in range(3):
                od[a] = (omega[3 * a] * dv[i, 0]
                         + omega[3 * a + 1] * dv[i, 1]
                         + omega[3 * a + 2] * dv[i, 2])
            cost += od[0] * dv[i, 0] + od[1] * dv[i, 1] + od[2] * dv[i, 2]
            for a in range(3):
                for s in range(6):
                    oj[6 * a + s] = (omega[3 * a] * Jv[i, 0, s]
                                     + omega[3 * a + 1] * Jv[i, 1, s]
                                     + omega[3 * a + 2] * Jv[i, 2, s])
            for r in range(6):
                for a in range(3):
                    bv[r] += Jv[i, a, r] * od[a]
                for s in range(6):
                    for a in range(3):
                        Hv[r, s] += Jv[i, a, r] * oj[6 * a + s]
    return H, b, cost


def weighted_cost(cnp.ndarray[cnp.float64_t, ndim=2] d,
                  cnp.ndarray[cnp.float64_t, ndim=3] C):
    cdef Py_ssize_t m = d.shape[0]
    cdef double[:, ::1] dv = np.ascontiguousarray(d)
    cdef double[:, :, ::1] Cv = np.ascontiguousarray(C)
    cdef double cost = 0.0
    cdef double omega[9]
    cdef double od[3]
    cdef Py_ssize_t i, a
    with nogil:
        for i in range(m):
            _inv3_sym(&Cv[i, 0, 0], omega)
            for a in range(3):
                od[a] = (omega[3 * a] * dv[i, 0]
                         + omega[3 * a + 1] * dv[i, 1]
                         + omega[3 * a + 2] * dv[i, 2])
            cost += od[0] * dv[i, 0] + od[1] * dv[i, 1] + od[2] * dv[i, 2]
    return cost
