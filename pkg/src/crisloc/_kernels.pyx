# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot loops. Same signatures as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()

OUTLIER = -1


def pairwise_dist(xy):
    cdef double[:, ::1] p = np.ascontiguousarray(xy, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], i, j
    out = np.zeros((n, n))
    cdef double[:, ::1] d = out
    cdef double dx, dy
    for i in range(n):
        for j in range(i + 1, n):
            dx = p[i, 0] - p[j, 0]
            dy = p[i, 1] - p[j, 1]
            d[i, j] = sqrt(dx * dx + dy * dy)
            d[j, i] = d[i, j]
    return out


def k_distances(xy, int k):
    cdef double[:, ::1] d = pairwise_dist(xy)
    cdef Py_ssize_t n = d.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    row = np.empty(n - 1)
    cdef double[::1] r = row
    for i in range(n):
        r[:i] = d[i, :i]
        r[i:] = d[i, i + 1:]
        row.partition(k - 1)
        o[i] = r[k - 1]
    return out


def dbscan_labels(xy, double rho, int min_pts):
    cdef double[:, ::1] d = pairwise_dist(xy)
    cdef Py_ssize_t n = d.shape[0], i, j, p, q, head, tail
    cdef cnp.int64_t[::1] count = np.zeros(n, dtype=np.int64)
    for i in range(n):
        for j in range(n):
            if d[i, j] <= rho:
                count[i] += 1
    # -2 = unvisited
    labels = np.full(n, -2, dtype=np.int64)
    cdef cnp.int64_t[::1] lab = labels
    # a point enters the queue at most once per neighbor that expands it
    cdef cnp.int64_t[::1] queue = np.empty(n * n + 1, dtype=np.int64)
    cdef cnp.int64_t cluster = 0
    for p in range(n):
        if lab[p] != -2:
            continue
        if count[p] < min_pts:
            lab[p] = -1
            continue
        lab[p] = cluster
        head = 0
        tail = 0
        for j in range(n):
            if d[p, j] <= rho:
                queue[tail] = j
                tail += 1
        while head < tail:
            q = queue[head]
            head += 1
            if lab[q] == -2 or lab[q] == -1:
                lab[q] = cluster
                if count[q] >= min_pts:
                    for j in range(n):
                        if d[q, j] <= rho:
                            queue[tail] = j
                            tail += 1
        cluster += 1
    return labels


def jenks_breakpoint(sorted_f, double eta):
    cdef double[::1] f = np.ascontiguousarray(sorted_f, dtype=np.float64)
    cdef Py_ssize_t n = f.shape[0], b, i
    cdef double m_lo, m_hi, ss_lo, ss_hi, cost, best_cost = INFINITY
    cdef Py_ssize_t best_b = -1
    for b in range(1, n):
        m_lo = 0.0
        for i in range(b):
            m_lo += f[i]
        m_lo /= b
        m_hi = 0.0
        for i in range(b, n):
            m_hi += f[i]
        m_hi /= (n - b)
        ss_lo = 0.0
        for i in range(b):
            ss_lo += (f[i] - m_lo) * (f[i] - m_lo)
        ss_hi = 0.0
        for i in range(b, n):
            ss_hi += (f[i] - m_hi) * (f[i] - m_hi)
        cost = ss_lo + eta * ss_hi
        if cost <= best_cost:
            best_b = b
            best_cost = cost
    return best_b


def portion_count(kappa_sorted, double k_prime, double tol=1e-9):
    cdef double[::1] k = np.ascontiguousarray(kappa_sorted, dtype=np.float64)
    cdef Py_ssize_t n = k.shape[0], i
    cdef double total = 0.0
    for i in range(n):
        total += k[i]
        if total >= k_prime - tol:
            return i + 1
    return n
