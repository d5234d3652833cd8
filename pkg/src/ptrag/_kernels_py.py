"""Pure-Python/numpy fallback with the same results as the compiled kernels."""

import numpy as np


def linear_assignment(cost):
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ValueError(f"cost matrix must be square, got {cost.shape[0]}x{cost.shape[1]}")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = np.flatnonzero(~used[1:]) + 1
            cur = cost[i0 - 1, free - 1] - u[i0] - v[free]
            better = cur < minv[free]
            upd = free[better]
            minv[upd] = cur[better]
            way[upd] = j0
            k = np.argmin(minv[free])
            delta = minv[free][k]
            j1 = free[k]
            used_idx = np.flatnonzero(used)
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    out = np.empty(n, dtype=np.int64)
    out[p[1:] - 1] = np.arange(n)
    return out


def mwu_null_counts(n, m):
    if n < 0 or m < 0:
        raise ValueError("sample sizes must be non-negative")
    width = n * m + 1
    # row[j] holds counts for (i, j); rolled over i
    prev = [np.eye(1, width, dtype=np.int64)[0] for _ in range(m + 1)]
    for i in range(1, n + 1):
        cur = [np.eye(1, width, dtype=np.int64)[0]]
        for j in range(1, m + 1):
            row = cur[j - 1].copy()
            row[j:] += prev[j][:width - j]
            cur.append(row)
        prev = cur
    return prev[m].copy()
