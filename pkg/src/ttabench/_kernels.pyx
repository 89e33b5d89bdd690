# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled RBF-kernel reductions used by the MMD estimator."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def rbf_kernel_sum(const double[:, ::1] X, const double[:, ::1] Y, double gamma,
                   bint exclude_diagonal=False):
    """sum_ij exp(-gamma * |x_i - y_j|^2), optionally skipping i == j.

    Row sums are accumulated first and then added in row order, so the
    result does not depend on how a caller might split Y.
    """
    cdef Py_ssize_t m = X.shape[0], n = Y.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double total = 0.0, row, diff, sq
    if Y.shape[1] != d:
        raise ValueError("feature widths differ")
    with nogil:
        for i in range(m):
            row = 0.0
            for j in range(n):
                if exclude_diagonal and i == j:
                    continue
                sq = 0.0
                for k in range(d):
                    diff = X[i, k] - Y[j, k]
                    sq = sq + diff * diff
                row = row + exp(-gamma * sq)
            total = total + row
    return total


def pairwise_sq_dists_upper(const double[:, ::1] Z):
    """Squared distances of all pairs i < j, in row-major pair order."""
    cdef Py_ssize_t n = Z.shape[0], d = Z.shape[1]
    cdef Py_ssize_t i, j, k, t = 0
    cdef double diff, sq
    out = np.empty(n * (n - 1) // 2, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                sq = 0.0
                for k in range(d):
                    diff = Z[i, k] - Z[j, k]
                    sq = sq + diff * diff
                o[t] = sq
                t = t + 1
    return out
