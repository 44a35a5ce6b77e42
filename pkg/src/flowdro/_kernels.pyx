# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: dense Hungarian assignment and Bland-rule simplex pivoting.

Both functions mirror ``flowdro._kernels_py`` exactly in interface and in
pivot/augmentation order, so the two backends agree on ties.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, fabs

cnp.import_array()


def linear_assignment(double[:, ::1] cost):
    """Minimum-cost perfect matching of a square cost matrix.

    Shortest augmenting path with row/column potentials, O(n^3).
    Returns ``col_of_row`` with ``col_of_row[i]`` the column matched to row ``i``.
    """
    cdef Py_ssize_t n = cost.shape[0]
    if cost.shape[1] != n:
        raise ValueError("cost matrix must be square")
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(n + 1)
    cdef double[::1] minv = np.empty(n + 1)
    cdef Py_ssize_t[::1] p = np.zeros(n + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(n + 1, dtype=np.intp)
    cdef char[::1] used = np.zeros(n + 1, dtype=np.int8)
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

    out = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] col_of_row = out
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return out


def simplex_iterate(double[:, ::1] tab, Py_ssize_t[::1] basis, Py_ssize_t n_enter,
                    double tol, Py_ssize_t max_iter):
    """Run Bland-rule primal simplex pivots on a tableau in place.

    ``tab`` has constraint rows ``0..m-1`` and the reduced-cost row ``m``;
    the last column is the right-hand side. Only columns ``< n_enter`` may
    enter the basis. Returns ``(status, iterations)`` with status 0 optimal,
    1 unbounded, 2 iteration limit.
    """
    cdef Py_ssize_t m = tab.shape[0] - 1
    cdef Py_ssize_t ncol = tab.shape[1] - 1
    cdef Py_ssize_t it = 0
    cdef Py_ssize_t i, j, r, enter, leave
    cdef double best, ratio, piv, f, a

    while it < max_iter:
        enter = -1
        for j in range(n_enter):
            if tab[m, j] < -tol:
                enter = j
                break
        if enter < 0:
            return 0, it

        leave = -1
        best = INFINITY
        for i in range(m):
            a = tab[i, enter]
            if a > tol:
                ratio = tab[i, ncol] / a
                if leave < 0 or ratio < best - 1e-12 * (1.0 + fabs(best)):
                    best = ratio
                    leave = i
                elif ratio <= best + 1e-12 * (1.0 + fabs(best)) and basis[i] < basis[leave]:
                    leave = i
        if leave < 0:
            return 1, it

        piv = tab[leave, enter]
        for j in range(ncol + 1):
            tab[leave, j] /= piv
        for r in range(m + 1):
            if r != leave:
                f = tab[r, enter]
                if f != 0.0:
                    for j in range(ncol + 1):
                        tab[r, j] -= f * tab[leave, j]
        basis[leave] = enter
        it += 1
    return 2, it
