"""Pure numpy versions of the compiled kernels.

Same algorithms and tie-breaking as ``_kernels.pyx``; the inner column
loops are vectorized instead of compiled.
"""

import numpy as np


def linear_assignment(cost):
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ValueError("cost matrix must be square")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.intp)
    col_of_row[p[1:] - 1] = np.arange(n)
    return col_of_row


def simplex_iterate(tab, basis, n_enter, tol, max_iter):
    m = tab.shape[0] - 1
    ncol = tab.shape[1] - 1
    it = 0
    while it < max_iter:
        neg = np.flatnonzero(tab[m, :n_enter] < -tol)
        if neg.size == 0:
            return 0, it
        enter = int(neg[0])

        leave = -1
        best = np.inf
        col = tab[:m, enter]
        for i in np.flatnonzero(col > tol):
            ratio = tab[i, ncol] / col[i]
            if leave < 0 or ratio < best - 1e-12 * (1.0 + abs(best)):
                best = ratio
                leave = int(i)
            elif ratio <= best + 1e-12 * (1.0 + abs(best)) and basis[i] < basis[leave]:
                leave = int(i)
        if leave < 0:
            return 1, it

        tab[leave] /= tab[leave, enter]
        f = tab[:, enter].copy()
        f[leave] = 0.0
        tab -= np.outer(f, tab[leave])
        basis[leave] = enter
        it += 1
    return 2, it
