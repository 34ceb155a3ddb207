# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; see ``_pykernels`` for semantics."""
import numpy as np

cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()


def krum_scores(updates, Py_ssize_t n_neighbors):
    cdef double[:, ::1] X = np.ascontiguousarray(updates, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, j, c, m, pos
    cdef double acc, diff, v
    dist_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] dist = dist_arr
    scores_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] scores = scores_arr
    cdef double *buf = <double *> malloc(max(n, 1) * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                for j in range(i + 1, n):
                    acc = 0.0
                    for c in range(d):
                        diff = X[i, c] - X[j, c]
                        acc = acc + diff * diff
                    dist[i, j] = acc
                    dist[j, i] = acc
            for i in range(n):
                m = 0
                for j in range(n):
                    if j == i:
                        continue
                    v = dist[i, j]
                    pos = m
                    while pos > 0 and buf[pos - 1] > v:
                        buf[pos] = buf[pos - 1]
                        pos -= 1
                    buf[pos] = v
                    m += 1
                acc = 0.0
                for j in range(min(n_neighbors, m)):
                    acc = acc + buf[j]
                scores[i] = acc
    finally:
        free(buf)
    return scores_arr


def select_extreme(scores, ids, Py_ssize_t k, bint largest):
    cdef double[::1] s = np.ascontiguousarray(scores, dtype=np.float64)
    cdef long long[::1] idv = np.ascontiguousarray(ids, dtype=np.int64)
    cdef Py_ssize_t m = s.shape[0], i, pos, filled = 0
    if k > m:
        k = m
    out_arr = np.empty(k, dtype=np.int64)
    if k == 0:
        return out_arr
    cdef long long[::1] out_ids = out_arr
    cdef double *best = <double *> malloc(k * sizeof(double))
    if best == NULL:
        raise MemoryError()
    cdef double key
    cdef long long item
    try:
        with nogil:
            for i in range(m):
                key = -s[i] if largest else s[i]
                item = idv[i]
                if filled == k:
                    # buffer sorted by (key, id); reject if not better than the worst
                    if key > best[k - 1] or (key == best[k - 1] and item > out_ids[k - 1]):
                        continue
                    pos = k - 1
                else:
                    pos = filled
                    filled += 1
                while pos > 0 and (best[pos - 1] > key or
                                   (best[pos - 1] == key and out_ids[pos - 1] > item)):
                    best[pos] = best[pos - 1]
                    out_ids[pos] = out_ids[pos - 1]
                    pos -= 1
                best[pos] = key
                out_ids[pos] = item
    finally:
        free(best)
    return out_arr


def rank_counts(scores, targets, excluded):
    cdef double[:, ::1] S = np.ascontiguousarray(scores, dtype=np.float64)
    cdef long long[::1] t = np.ascontiguousarray(targets, dtype=np.int64)
    excluded = np.ascontiguousarray(excluded)
    if excluded.dtype == np.bool_:
        excluded = excluded.view(np.uint8)  # same bytes, no copy
    cdef cnp.uint8_t[:, ::1] ex = np.ascontiguousarray(excluded, dtype=np.uint8)
    cdef Py_ssize_t n = S.shape[0], m = S.shape[1], r, c
    cdef long long g, e
    cdef double ts
    greater_arr = np.empty(n, dtype=np.int64)
    ties_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] greater = greater_arr
    cdef long long[::1] ties = ties_arr
    with nogil:
        for r in range(n):
            ts = S[r, t[r]]
            g = 0
            e = 0
            for c in range(m):
                if not ex[r, c]:
                    g += S[r, c] > ts
                    e += S[r, c] == ts
            if not ex[r, t[r]]:
                e -= 1  # the target ties with itself
            greater[r] = g
            ties[r] = e
    return greater_arr, ties_arr


def scatter_add_rows(out, index, rows):
    cdef double[:, ::1] o = out
    cdef long long[::1] idx = np.ascontiguousarray(index, dtype=np.int64)
    cdef double[:, ::1] R = np.ascontiguousarray(rows, dtype=np.float64)
    cdef Py_ssize_t m = idx.shape[0], d = R.shape[1], j, c
    cdef long long row
    with nogil:
        for j in range(m):
            row = idx[j]
            for c in range(d):
                o[row, c] += R[j, c]
    return out
