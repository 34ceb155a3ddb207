"""Numpy reference versions of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same
signature and semantics. The compiled twin is preferred at import time;
this module is the fallback and the cross-check in tests.
"""
import numpy as np


def krum_scores(updates, n_neighbors):
    """Sum of squared distances from each row to its ``n_neighbors`` closest other rows."""
    X = np.ascontiguousarray(updates, dtype=np.float64)
    n = X.shape[0]
    # coordinates and neighbours are summed left to right so that exact ties
    # between rows survive rounding the same way in every backend
    dist = np.zeros((n, n), dtype=np.float64)
    if X.shape[1]:
        for i in range(n - 1):
            diff = X[i + 1:] - X[i]
            dist[i, i + 1:] = np.cumsum(diff * diff, axis=1)[:, -1]
            dist[i + 1:, i] = dist[i, i + 1:]
    scores = np.zeros(n, dtype=np.float64)
    for i in range(n):
        others = np.delete(dist[i], i)
        others.sort()
        if n_neighbors > 0 and others.size:
            scores[i] = np.cumsum(others[:n_neighbors])[-1]
    return scores


def select_extreme(scores, ids, k, largest):
    """Ids of the ``k`` best entries, best first; ties go to the smaller id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    key = -scores if largest else scores
    order = np.lexsort((ids, key))
    return ids[order[:k]].copy()


def rank_counts(scores, targets, excluded):
    """Per row: count of admissible items scoring strictly above / equal to the target.

    ``excluded`` is a boolean matrix of items removed from the candidate
    set. The target itself is never counted as a tie.
    """
    S = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(S.shape[0])
    t = S[rows, targets][:, None]
    admissible = ~np.asarray(excluded, dtype=bool)
    greater = ((S > t) & admissible).sum(axis=1)
    ties = ((S == t) & admissible).sum(axis=1)
    ties -= admissible[rows, targets].astype(np.int64)
    return greater.astype(np.int64), ties.astype(np.int64)


def scatter_add_rows(out, index, rows):
    """In place: ``out[index[j]] += rows[j]`` applied in order of ``j``."""
    np.add.at(out, np.asarray(index, dtype=np.int64), np.asarray(rows, dtype=np.float64))
    return out
