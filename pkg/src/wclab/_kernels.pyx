# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused merge kernels for the adapter hot paths.

Each function makes a single pass over the large matrix instead of the
several temporary-allocating passes the numpy fallback needs. Inputs must
be C-contiguous float64; callers in ``wclab.adapters`` guarantee this.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "ext"


def add_scaled(const double[:, ::1] x, const double[:, ::1] y, double s):
    """x + s*y, elementwise."""
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    if y.shape[0] != m or y.shape[1] != n:
        raise ValueError("add_scaled: shape mismatch")
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(m):
        for j in range(n):
            out[i, j] = x[i, j] + s * y[i, j]
    return out_arr


def scale_columns(const double[:, ::1] w, const double[::1] d):
    """Column j of the result is d[j] times column j of w."""
    cdef Py_ssize_t m = w.shape[0], n = w.shape[1], i, j
    if d.shape[0] != n:
        raise ValueError("scale_columns: length of d must equal column count")
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(m):
        for j in range(n):
            out[i, j] = w[i, j] * d[j]
    return out_arr


def column_sq_norms(const double[:, ::1] w):
    """Per-column sum of squares (length w.shape[1])."""
    cdef Py_ssize_t m = w.shape[0], n = w.shape[1], i, j
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for i in range(m):
        for j in range(n):
            out[j] += w[i, j] * w[i, j]
    return out_arr


def skew_lowrank(const double[:, ::1] dp, const double[:, ::1] cp):
    """dp @ cp.T - cp @ dp.T; antisymmetry enforced by mirrored writes."""
    cdef Py_ssize_t n = dp.shape[0], r = dp.shape[1], i, j, k
    cdef double acc
    if cp.shape[0] != n or cp.shape[1] != r:
        raise ValueError("skew_lowrank: dp and cp must have identical shapes")
    out_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(r):
                acc += dp[i, k] * cp[j, k] - cp[i, k] * dp[j, k]
            out[i, j] = acc
            out[j, i] = -acc
    return out_arr


def rotation_combine(const double[:, ::1] w, const double[:, ::1] u, const double[:, ::1] v,
                     const double[:, ::1] dp, const double[:, ::1] cp, double s_p):
    """w + s_p*(u @ cp.T - v @ dp.T) with u = w @ dp, v = w @ cp precomputed."""
    cdef Py_ssize_t m = w.shape[0], n = w.shape[1], r = dp.shape[1], i, j, k
    cdef double su, sv
    if u.shape[0] != m or v.shape[0] != m or u.shape[1] != r or v.shape[1] != r:
        raise ValueError("rotation_combine: u/v shape mismatch")
    if dp.shape[0] != n or cp.shape[0] != n or cp.shape[1] != r:
        raise ValueError("rotation_combine: dp/cp shape mismatch")
    # Transposed factor copies give unit-stride inner loops (they are tiny).
    dpt_arr = np.ascontiguousarray(np.asarray(dp).T)
    cpt_arr = np.ascontiguousarray(np.asarray(cp).T)
    cdef const double[:, ::1] dpt = dpt_arr
    cdef const double[:, ::1] cpt = cpt_arr
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    if r == 1:
        # Rank-2 update, single fused pass; this is the default r_p = 1 path.
        for i in range(m):
            su = s_p * u[i, 0]
            sv = s_p * v[i, 0]
            for j in range(n):
                out[i, j] = w[i, j] + su * cpt[0, j] - sv * dpt[0, j]
        return out_arr
    for i in range(m):
        for j in range(n):
            out[i, j] = w[i, j]
        for k in range(r):
            su = s_p * u[i, k]
            sv = s_p * v[i, k]
            for j in range(n):
                out[i, j] += su * cpt[k, j] - sv * dpt[k, j]
    return out_arr


def prediag_combine(const double[:, ::1] w_pre, const double[:, ::1] ba, const double[::1] d, double s):
    """w_pre scaled per column by d, plus s*ba."""
    cdef Py_ssize_t m = w_pre.shape[0], n = w_pre.shape[1], i, j
    if ba.shape[0] != m or ba.shape[1] != n or d.shape[0] != n:
        raise ValueError("prediag_combine: shape mismatch")
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(m):
        for j in range(n):
            out[i, j] = w_pre[i, j] * d[j] + s * ba[i, j]
    return out_arr
