# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: min-cost assignment and the Mann-Whitney null distribution."""

import numpy as np

from libc.math cimport INFINITY


def linear_assignment(double[:, ::1] cost):
    """Row -> column permutation minimising total cost of a square matrix.

    Shortest augmenting path Hungarian method, O(n^3).  Ties resolve to the
    lowest column index.
    """
    cdef Py_ssize_t n = cost.shape[0]
    if cost.shape[1] != n:
        raise ValueError(f"cost matrix must be square, got {cost.shape[0]}x{cost.shape[1]}")
    u_arr = np.zeros(n + 1)
    v_arr = np.zeros(n + 1)
    minv_arr = np.empty(n + 1)
    p_arr = np.zeros(n + 1, dtype=np.int64)
    way_arr = np.zeros(n + 1, dtype=np.int64)
    used_arr = np.zeros(n + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr, v = v_arr, minv = minv_arr
    cdef long long[::1] p = p_arr, way = way_arr
    cdef unsigned char[::1] used = used_arr
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    out = np.empty(n, dtype=np.int64)
    cdef long long[::1] o = out
    for j in range(1, n + 1):
        o[p[j] - 1] = j - 1
    return out


def mwu_null_counts(int n, int m):
    """Number of rank arrangements giving each U in 0..n*m (no ties)."""
    if n < 0 or m < 0:
        raise ValueError("sample sizes must be non-negative")
    cdef Py_ssize_t width = n * m + 1
    table = np.zeros((n + 1, m + 1, width), dtype=np.int64)
    cdef long long[:, :, ::1] t = table
    cdef Py_ssize_t i, j, u
    for i in range(n + 1):
        for j in range(m + 1):
            if i == 0 or j == 0:
                t[i, j, 0] = 1
                continue
            for u in range(width):
                t[i, j, u] = t[i, j - 1, u]
                if u >= j:
                    t[i, j, u] += t[i - 1, j, u - j]
    return table[n, m].copy()
