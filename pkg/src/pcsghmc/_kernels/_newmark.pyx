# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython Newmark time-stepping kernel (constant average acceleration)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def time_loop(double[::1] masses, double[:, :, ::1] C, double[:, :, ::1] Khat_inv,
              double[::1] ground_accel, double dt):
    """Batched Newmark integration; same contract as newmark_py.time_loop."""
    cdef Py_ssize_t B = C.shape[0]
    cdef Py_ssize_t n = C.shape[1]
    cdef Py_ssize_t T = ground_accel.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out_arr = np.zeros((B, T, n))
    cdef double[:, :, ::1] out = out_arr

    cdef double[:, ::1] u = np.zeros((B, n))
    cdef double[:, ::1] v = np.zeros((B, n))
    cdef double[:, ::1] a = np.full((B, n), -ground_accel[0])
    cdef double[::1] rhs = np.zeros(n)
    cdef double[::1] u_new = np.zeros(n)

    cdef Py_ssize_t b, j, i, q
    cdef double inv_dt = 1.0 / dt
    cdef double inv_dt2 = inv_dt * inv_dt
    cdef double agj, s, cu, a_new

    for b in range(B):
        for i in range(n):
            out[b, 0, i] = a[b, i] + ground_accel[0]

    for j in range(1, T):
        agj = ground_accel[j]
        for b in range(B):
            for i in range(n):
                rhs[i] = -masses[i] * agj + masses[i] * (
                    4.0 * u[b, i] * inv_dt2 + 4.0 * v[b, i] * inv_dt + a[b, i])
            for i in range(n):
                s = 0.0
                for q in range(n):
                    cu = 2.0 * u[b, q] * inv_dt + v[b, q]
                    s += C[b, i, q] * cu
                rhs[i] += s
            for i in range(n):
                s = 0.0
                for q in range(n):
                    s += Khat_inv[b, i, q] * rhs[q]
                u_new[i] = s
            for i in range(n):
                a_new = 4.0 * (u_new[i] - u[b, i]) * inv_dt2 - 4.0 * v[b, i] * inv_dt - a[b, i]
                v[b, i] = v[b, i] + 0.5 * dt * (a[b, i] + a_new)
                u[b, i] = u_new[i]
                a[b, i] = a_new
                out[b, j, i] = a_new + agj
    return out_arr
