# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the decoding and counting kernels (see _kernels_py.py)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def viterbi_path(log_a, log_b, double tol):
    cdef const double[:, ::1] A = np.ascontiguousarray(log_a, dtype=np.float64)
    cdef const double[:, ::1] B = np.ascontiguousarray(log_b, dtype=np.float64)
    cdef Py_ssize_t T = B.shape[0]
    cdef Py_ssize_t N = B.shape[1]
    beta_arr = np.zeros((T, N), dtype=np.float64)
    cdef double[:, ::1] beta = beta_arr
    path_arr = np.empty(T, dtype=np.int64)
    cdef long long[::1] path = path_arr
    vals_arr = np.empty(N, dtype=np.float64)
    cdef double[::1] vals = vals_arr
    cdef Py_ssize_t t, i, j
    cdef double best, v
    cdef double ninf = -np.inf

    for t in range(T - 2, -1, -1):
        for i in range(N):
            best = ninf
            for j in range(N):
                v = A[i, j] + (B[t + 1, j] + beta[t + 1, j])
                if v > best:
                    best = v
            beta[t, i] = best

    for i in range(N):
        vals[i] = B[0, i] + beta[0, i]
    path[0] = _first_within(vals, N, tol)
    for t in range(1, T):
        for i in range(N):
            vals[i] = A[path[t - 1], i] + B[t, i] + beta[t, i]
        path[t] = _first_within(vals, N, tol)
    return path_arr


cdef Py_ssize_t _first_within(double[::1] vals, Py_ssize_t n, double tol):
    cdef double best = vals[0]
    cdef Py_ssize_t i
    for i in range(1, n):
        if vals[i] > best:
            best = vals[i]
    for i in range(n):
        if vals[i] >= best - tol:
            return i
    return 0


def count_marginals(plans, Py_ssize_t n_actions):
    cdef const long long[:, ::1] P = np.ascontiguousarray(plans, dtype=np.int64)
    cdef Py_ssize_t K = P.shape[0]
    cdef Py_ssize_t T = P.shape[1]
    counts_arr = np.zeros((T, n_actions), dtype=np.int64)
    cdef long long[:, ::1] counts = counts_arr
    cdef Py_ssize_t k, t
    for k in range(K):
        for t in range(T):
            counts[t, P[k, t]] += 1
    return counts_arr


def count_transitions(flat, offsets, Py_ssize_t n_actions):
    cdef const long long[::1] F = np.ascontiguousarray(flat, dtype=np.int64)
    cdef const long long[::1] O = np.ascontiguousarray(offsets, dtype=np.int64)
    counts_arr = np.zeros((n_actions, n_actions), dtype=np.int64)
    cdef long long[:, ::1] counts = counts_arr
    cdef Py_ssize_t s, p
    for s in range(O.shape[0] - 1):
        for p in range(O[s], O[s + 1] - 1):
            counts[F[p], F[p + 1]] += 1
    return counts_arr
