# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled reduction kernels.

Every output element is accumulated sequentially over the reduction index in
ascending order, seeded with the first term.  The build disables floating-point
contraction so results are bit-identical to the numpy fallback in
``neq._pykernels`` and independent of which output rows are requested.
"""

cimport cython
from cython cimport floating

import numpy as np


def matmul_tn(const floating[:, ::1] a, const floating[:, ::1] b):
    """Return ``a.T @ b`` for ``a`` of shape (K, M) and ``b`` of shape (K, N)."""
    cdef Py_ssize_t K = a.shape[0]
    cdef Py_ssize_t M = a.shape[1]
    cdef Py_ssize_t N = b.shape[1]
    if b.shape[0] != K:
        raise ValueError(f"inner dimensions differ: {K} vs {b.shape[0]}")
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((M, N), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t k, i, j
    cdef floating aki
    if K == 0:
        return out_arr
    with nogil:
        for i in range(M):
            aki = a[0, i]
            for j in range(N):
                out[i, j] = aki * b[0, j]
        for k in range(1, K):
            for i in range(M):
                aki = a[k, i]
                for j in range(N):
                    out[i, j] = out[i, j] + aki * b[k, j]
    return out_arr


def matmul_nn(const floating[:, ::1] a, const floating[:, ::1] b):
    """Return ``a @ b`` for ``a`` of shape (M, K) and ``b`` of shape (K, N)."""
    cdef Py_ssize_t M = a.shape[0]
    cdef Py_ssize_t K = a.shape[1]
    cdef Py_ssize_t N = b.shape[1]
    if b.shape[0] != K:
        raise ValueError(f"inner dimensions differ: {K} vs {b.shape[0]}")
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((M, N), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t k, i, j
    cdef floating aik
    if K == 0:
        return out_arr
    with nogil:
        for i in range(M):
            aik = a[i, 0]
            for j in range(N):
                out[i, j] = aik * b[0, j]
            for k in range(1, K):
                aik = a[i, k]
                for j in range(N):
                    out[i, j] = out[i, j] + aik * b[k, j]
    return out_arr


def column_sums(const floating[:, ::1] a):
    """Sum the rows of ``a`` (shape (K, N)) into a length-N vector."""
    cdef Py_ssize_t K = a.shape[0]
    cdef Py_ssize_t N = a.shape[1]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros(N, dtype=dtype)
    cdef floating[::1] out = out_arr
    cdef Py_ssize_t k, j
    if K == 0:
        return out_arr
    with nogil:
        for j in range(N):
            out[j] = a[0, j]
        for k in range(1, K):
            for j in range(N):
                out[j] = out[j] + a[k, j]
    return out_arr
