"""Pure-Python versions of the hot loops. Same signatures as ``_kernels``."""
from __future__ import annotations

from collections import deque

import numpy as np

OUTLIER = -1


def pairwise_dist(xy):
    xy = np.asarray(xy, dtype=np.float64)
    diff = xy[:, None, :] - xy[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def k_distances(xy, k):
    """Distance from each point to its k-th nearest other point."""
    d = pairwise_dist(xy)
    n = d.shape[0]
    out = np.empty(n)
    for i in range(n):
        row = sorted(d[i, j] for j in range(n) if j != i)
        out[i] = row[k - 1]
    return out


def dbscan_labels(xy, rho, min_pts):
    """DBSCAN in index order; neighborhoods include the point itself."""
    d = pairwise_dist(xy)
    n = d.shape[0]
    neighbors = [[j for j in range(n) if d[i, j] <= rho] for i in range(n)]
    labels = [None] * n            # None = unvisited
    cluster = 0
    for p in range(n):
        if labels[p] is not None:
            continue
        if len(neighbors[p]) < min_pts:
            labels[p] = OUTLIER
            continue
        labels[p] = cluster
        queue = deque(neighbors[p])
        while queue:
            q = queue.popleft()
            if labels[q] is None or labels[q] == OUTLIER:
                labels[q] = cluster
                if len(neighbors[q]) >= min_pts:
                    queue.extend(neighbors[q])
        cluster += 1
    return np.array(labels, dtype=np.int64)


def jenks_breakpoint(sorted_f, eta):
    """Number of values in the lower class of the best weighted 2-class split.

    ``sorted_f`` is ascending. Minimizes SS(lower) + eta * SS(upper); ties go
    to the larger lower class, i.e. the smaller upper class.
    """
    f = [float(v) for v in sorted_f]
    n = len(f)
    best_b, best_cost = -1, float("inf")
    for b in range(1, n):
        lo, hi = f[:b], f[b:]
        m_lo = sum(lo) / len(lo)
        m_hi = sum(hi) / len(hi)
        cost = sum((v - m_lo) ** 2 for v in lo) + eta * sum((v - m_hi) ** 2 for v in hi)
        if cost <= best_cost:
            best_b, best_cost = b, cost
    return best_b


def portion_count(kappa_sorted, k_prime, tol=1e-9):
    """How many leading neighbors it takes for the portions to reach k_prime."""
    total = 0.0
    for i, kap in enumerate(kappa_sorted):
        total += kap
        if total >= k_prime - tol:
            return i + 1
    return len(kappa_sorted)
