"""Brute-force reference implementations and equivalence checks.

Each ``check_*`` function runs a production routine against a slow but
obviously correct reference on seeded random instances and returns an
``OracleResult``. The ``oracle`` CLI subcommand and the acceptance
tests share these.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from fedpoison.attacks import CandidatePool, hardest_negatives, hardest_pseudo_positives
from fedpoison.dataset import ClientProfile
from fedpoison.defenses import agg_krum, agg_median, agg_multi_krum, agg_trimmed_mean
from fedpoison.evaluation import hr_at_k, ndcg_at_k, top_eigenpairs
from fedpoison.model import (ModelParams, PredictorKind, UserModelKind, bpr_gradients,
                             init_params, pair_loss, user_embed)


@dataclass(frozen=True)
class OracleResult:
    name: str
    passed: bool
    instances: int
    worst: float
    seconds: float

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: {self.instances} instances, worst={self.worst:.3g}, "
                f"{self.seconds:.2f}s")


# -- gradients ------------------------------------------------------------------------

def fd_gradient(params, profile, pos, neg, user_kind, h=1e-5):
    """Central finite differences of the mean pair loss over the whole parameter vector."""
    base = params.vector
    grad = np.zeros_like(base)
    for c in range(base.size):
        v = base.copy()
        v[c] += h
        up = pair_loss(ModelParams(params.layout, v), profile, pos, neg, user_kind)
        v[c] -= 2 * h
        down = pair_loss(ModelParams(params.layout, v), profile, pos, neg, user_kind)
        grad[c] = (up - down) / (2 * h)
    return grad


def _near_relu_kink(params, profile, items, user_kind, margin=1e-3):
    # finite differences straddling a ReLU kink are not a derivative
    if params.predictor_kind is not PredictorKind.MLP:
        return False
    w1, b1, _, _ = params.mlp()
    d = params.dim
    u = user_embed(params, profile, user_kind)
    pre = params.item_table[items] @ w1[:, d:].T + w1[:, :d] @ u + b1
    return bool(np.abs(pre).min() < margin)


def relative_error(a, b, floor=1e-5):
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def check_gradients(instances=100, d=4, seed=0, tol=1e-4, h=1e-5):
    """Analytic BPR gradients against finite differences, cycling over model variants."""
    rng = np.random.default_rng(seed)
    combos = list(itertools.product(PredictorKind, UserModelKind))
    t0 = time.perf_counter()
    worst, done = 0.0, 0
    while done < instances:
        predictor, user_kind = combos[done % len(combos)]
        params = init_params(5, 12, d, predictor, seed=int(rng.integers(1 << 30)))
        params.vector[:] = rng.normal(0.0, 1.0, params.vector.size)
        profile = ClientProfile(int(rng.integers(5)),
                                tuple(rng.integers(0, 12, int(rng.integers(1, 5))).tolist()), 0, 1)
        k = int(rng.integers(1, 4))
        pos, neg = rng.integers(0, 12, k), rng.integers(0, 12, k)
        if _near_relu_kink(params, profile, np.concatenate([pos, neg]), user_kind):
            continue
        g = bpr_gradients(params, profile, pos, neg, user_kind).to_dense(params.layout)
        worst = max(worst, relative_error(g, fd_gradient(params, profile, pos, neg, user_kind, h)))
        done += 1
    return OracleResult("bpr gradient vs finite differences", worst < tol, done, worst,
                        time.perf_counter() - t0)


# -- aggregators ----------------------------------------------------------------------

def median_oracle(X):
    S = np.sort(X, axis=0)
    n = S.shape[0]
    if n % 2:
        return S[n // 2]
    return (S[n // 2 - 1] + S[n // 2]) / 2.0


def trimmed_mean_oracle(X, beta):
    S = np.sort(X, axis=0)
    out = np.empty(X.shape[1])
    for j in range(X.shape[1]):
        kept = list(S[beta:X.shape[0] - beta, j])
        out[j] = sum(kept) / len(kept)
    return out


def krum_oracle_index(X, f):
    n = len(X)
    best, best_score = None, None
    for i in range(n):
        dists = sorted(sum((a - b) ** 2 for a, b in zip(X[i].tolist(), X[j].tolist()))
                       for j in range(n) if j != i)
        s = sum(dists[:n - f - 2])
        if best_score is None or s < best_score:
            best, best_score = i, s
    return best


def multi_krum_oracle(X, f, m):
    remaining = list(range(len(X)))
    chosen = []
    for _ in range(m):
        k = krum_oracle_index(X[remaining], f)
        chosen.append(remaining.pop(k))
    return X[sorted(chosen)].mean(axis=0)


def check_aggregators(instances=500, max_n=8, max_d=16, seed=0):
    """Median/TrimmedMean against sort oracles; Krum/Multi-Krum against brute-force scoring.

    Every instance checks every admissible (beta, f, m_select) for its ``n``.
    """
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    mismatches = 0
    for t in range(instances):
        n = int(rng.integers(1, max_n + 1))
        d = int(rng.integers(1, max_d + 1))
        X = rng.standard_normal((n, d))
        if t % 5 == 0:
            X = np.round(X, 1)  # ties
        mismatches += not np.array_equal(agg_median(X), median_oracle(X))
        for beta in range(0, (n - 1) // 2 + 1):
            mismatches += not np.array_equal(agg_trimmed_mean(X, beta),
                                             trimmed_mean_oracle(X, beta))
        for f in range(0, n - 2):
            mismatches += not np.array_equal(agg_krum(X, f), X[krum_oracle_index(X, f)])
            for m in range(1, n - f - 1):
                mismatches += not np.array_equal(agg_multi_krum(X, f, m),
                                                 multi_krum_oracle(X, f, m))
    return OracleResult("aggregators vs brute force", mismatches == 0, instances,
                        float(mismatches), time.perf_counter() - t0)


# -- retrieval ------------------------------------------------------------------------

def retrieval_oracle(table, u, pool_ids, exclude, k, largest):
    """Sort by score (best first) with ties broken towards the smaller item id."""
    cand = [i for i in pool_ids if i not in exclude]
    sign = -1.0 if largest else 1.0
    return sorted(cand, key=lambda i: (sign * float(table[i] @ u), i))[:k]


def check_retrieval(instances=1000, max_items=500, seed=0):
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    mismatches = 0
    for t in range(instances):
        num_items = int(rng.integers(2, max_items + 1))
        d = int(rng.integers(1, 9))
        table = rng.standard_normal((num_items, d))
        if t % 4 == 0:
            table = np.round(table, 0)  # many exact ties
        u = rng.standard_normal(d)
        pool_size = int(rng.integers(1, num_items + 1))
        pool = np.sort(rng.choice(num_items, pool_size, replace=False))
        exclude = set(rng.choice(num_items, int(rng.integers(0, 4)), replace=False).tolist())
        admissible = len([i for i in pool if i not in exclude])
        if admissible == 0:
            continue
        k = int(rng.integers(1, admissible + 1))
        cp = CandidatePool(pool.astype(np.int64))
        for largest, fn in ((True, hardest_negatives), (False, hardest_pseudo_positives)):
            got = [int(i) for i in fn(table, u, k, cp, exclude)]
            mismatches += got != retrieval_oracle(table, u, pool.tolist(), exclude, k, largest)
    return OracleResult("retrieval vs argsort", mismatches == 0, instances, float(mismatches),
                        time.perf_counter() - t0)


# -- metrics --------------------------------------------------------------------------

def check_metrics(max_rank=20, k=5):
    t0 = time.perf_counter()
    mismatches = 0
    for rank in range(1, max_rank + 1):
        hr = 1 if rank <= k else 0
        ndcg = 1.0 / math.log2(rank + 1) if rank <= k else 0.0
        mismatches += hr_at_k(rank, k) != hr or ndcg_at_k(rank, k) != ndcg
    mismatches += ndcg_at_k(3, 5) != 0.5
    return OracleResult("hr/ndcg definitions", mismatches == 0, max_rank, float(mismatches),
                        time.perf_counter() - t0)


# -- PCA ------------------------------------------------------------------------------

def check_pca(instances=100, rows=50, cols=8, seed=0, tol=1e-6):
    """Power-iteration eigenvalues against ``numpy.linalg.eigvalsh`` on sample covariances."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(instances):
        X = rng.standard_normal((rows, cols))
        Xc = X - X.mean(axis=0)
        cov = Xc.T @ Xc / (rows - 1)
        ref = np.sort(np.linalg.eigvalsh(cov))[::-1]
        got, _ = top_eigenpairs(cov, k=cols)
        worst = max(worst, float(np.max(np.abs(got - ref) / np.abs(ref))))
    return OracleResult("pca eigenvalues vs eigvalsh", worst < tol, instances, worst,
                        time.perf_counter() - t0)


ALL_CHECKS = {
    "gradients": check_gradients,
    "aggregators": check_aggregators,
    "retrieval": check_retrieval,
    "metrics": check_metrics,
    "pca": check_pca,
}


def run_all(names=None, seed=0):
    out = []
    for name in names or ALL_CHECKS:
        fn = ALL_CHECKS[name]
        out.append(fn() if name == "metrics" else fn(seed=seed))
    return out
