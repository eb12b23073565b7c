# cython: language_level=3
"""Compiled twins of the kernels in ``_kernels_py``. Same signatures, same results."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


def cholesky_psd(H, double tol):
    cdef double[:, ::1] h = np.ascontiguousarray(H, dtype=np.float64)
    cdef Py_ssize_t n = h.shape[0]
    R_arr = np.zeros((n, n))
    cdef double[:, ::1] R = R_arr
    cdef Py_ssize_t i, j, k
    cdef double d, s, rjj
    for j in range(n):
        d = h[j, j]
        for k in range(j):
            d -= R[j, k] * R[j, k]
        if d < -tol:
            return R_arr, j
        if d <= tol:
            continue
        rjj = sqrt(d)
        R[j, j] = rjj
        for i in range(j + 1, n):
            s = h[i, j]
            for k in range(j):
                s -= R[i, k] * R[j, k]
            R[i, j] = s / rjj
    return R_arr, -1


def max_sign_quadform(X):
    cdef double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t k = x.shape[0]
    if k == 0:
        return 0.0
    v_arr = np.ones(k)
    r_arr = np.asarray(x).sum(axis=1)
    cdef double[::1] v = v_arr
    cdef double[::1] r = r_arr
    cdef double q = 0.0
    cdef Py_ssize_t i, j, m
    cdef unsigned long long c, total
    for i in range(k):
        q += r[i]
    cdef double best = q
    cdef double vj
    total = (<unsigned long long>1) << (k - 1)
    for c in range(1, total):
        j = 1
        while not (c >> (j - 1)) & 1:
            j += 1
        vj = v[j]
        q = q - 4.0 * vj * r[j] + 4.0 * x[j, j]
        for m in range(k):
            r[m] -= 2.0 * vj * x[m, j]
        v[j] = -vj
        if q > best:
            best = q
    return best


def pattern_abs_sums(X, idx, lengths):
    cdef double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef long long[:, ::1] ix = np.ascontiguousarray(idx, dtype=np.int64)
    cdef long long[::1] ln = np.ascontiguousarray(lengths, dtype=np.int64)
    cdef Py_ssize_t P = ln.shape[0]
    out_arr = np.empty(P)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t p, a, b, m
    cdef double s
    for p in range(P):
        m = ln[p]
        s = 0.0
        for a in range(m):
            for b in range(m):
                s += fabs(x[ix[p, a], ix[p, b]])
        out[p] = s
    return out_arr


def toeplitz_gram(G):
    cdef double[:, ::1] g = np.ascontiguousarray(G, dtype=np.float64)
    cdef Py_ssize_t T = g.shape[0]
    H_arr = np.empty((T, T))
    cdef double[:, ::1] H = H_arr
    cdef Py_ssize_t d, s, j
    cdef double acc
    for d in range(T):
        acc = 0.0
        # walk the d-th subdiagonal from its far end so each prefix is one add
        for s in range(T - d - 1, -1, -1):
            j = T - d - 1 - s
            acc += g[j + d, j]
            H[s, s + d] = acc
            H[s + d, s] = acc
    return H_arr
