"""Full-ranking metrics, sample-hardness profiles and PCA of gradient features."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from fedpoison import kernels
from fedpoison.dataset import Role
from fedpoison.model import UserModelKind, score_all

DEFAULT_BUCKET_EDGES = (1, 5, 10, 20, 50, 100, 200, math.inf)


@dataclass(frozen=True)
class RankingResult:
    client_id: int
    rank: int
    greater: int
    ties: int


def rank_from_counts(greater, ties):
    """1-based rank: items strictly above count fully, tied items count half (floored)."""
    return 1 + int(greater) + int(ties) // 2


def user_matrix(params, clients, user_kind=UserModelKind.SEQ_MEAN):
    """Stack of user embeddings for ``clients``."""
    user_kind = UserModelKind(user_kind)
    if user_kind is UserModelKind.ID:
        return params.user_table[[c.user_id for c in clients]].copy()
    lens = np.array([len(c.train_items) for c in clients], dtype=np.int64)
    if (lens == 0).any():
        raise ValueError("SeqMean user model needs non-empty profiles")
    items = np.concatenate([np.asarray(c.train_items, dtype=np.int64) for c in clients])
    owner = np.repeat(np.arange(len(clients), dtype=np.int64), lens)
    out = np.zeros((len(clients), params.dim))
    kernels.scatter_add_rows(out, owner, np.ascontiguousarray(params.item_table[items]))
    return out / lens[:, None]


def _exclusion_mask(clients, num_items, target, exclude_seen):
    mask = np.zeros((len(clients), num_items), dtype=bool)
    if not exclude_seen:
        return mask
    for row, c in enumerate(clients):
        mask[row, list(c.train_items)] = True
        if target == "test":
            mask[row, c.val_item] = True
    return mask


def rank_clients(params, clients, user_kind=UserModelKind.SEQ_MEAN, target="test",
                 exclude_seen=True):
    """Rank each client's held-out item against the whole catalogue.

    ``target="test"`` excludes the profile and the validation item;
    ``target="val"`` excludes the profile only.
    """
    if target not in ("test", "val"):
        raise ValueError("target must be 'test' or 'val'")
    if not clients:
        return []
    scores = score_all(params, user_matrix(params, clients, user_kind))
    targets = np.array([c.test_item if target == "test" else c.val_item for c in clients],
                       dtype=np.int64)
    mask = _exclusion_mask(clients, params.layout.num_items, target, exclude_seen)
    # a held-out item that also occurs in the profile stays rankable
    mask[np.arange(len(clients)), targets] = False
    greater, ties = kernels.rank_counts(scores, targets, mask)
    return [RankingResult(c.user_id, rank_from_counts(g, t), int(g), int(t))
            for c, g, t in zip(clients, greater, ties)]


def rank_test_item(params, client, user_kind=UserModelKind.SEQ_MEAN, exclude_seen=True):
    return rank_clients(params, [client], user_kind, "test", exclude_seen)[0]


def hr_at_k(rank, k=5):
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1 if rank <= k else 0


def ndcg_at_k(rank, k=5):
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def evaluate_epoch(params, registry, user_kind=UserModelKind.SEQ_MEAN, k=5, target="test",
                   exclude_seen=True):
    """Mean ``(HR@k, nDCG@k)`` over benign clients only."""
    benign = registry.benign()
    if not benign:
        raise ValueError("no benign client to evaluate")
    results = rank_clients(params, benign, user_kind, target, exclude_seen)
    hr = sum(hr_at_k(r.rank, k) for r in results) / len(results)
    ndcg = math.fsum(ndcg_at_k(r.rank, k) for r in results) / len(results)
    return hr, ndcg


# -- sample hardness ------------------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    """Training pairs one client used in a logged round."""

    client_id: int
    role: Role
    positives: tuple
    negatives: tuple


@dataclass(frozen=True)
class BucketStat:
    bucket: str
    role: Role
    polarity: str
    mean: float
    std: float
    n: int

    @property
    def empty(self):
        return self.n == 0


@dataclass(frozen=True)
class HardnessProfile:
    stats: tuple

    def get(self, bucket, role, polarity):
        for s in self.stats:
            if s.bucket == bucket and s.role is Role(role) and s.polarity == polarity:
                return s
        raise KeyError((bucket, role, polarity))

    def buckets(self):
        seen = []
        for s in self.stats:
            if s.bucket not in seen:
                seen.append(s.bucket)
        return seen


def bucket_label(lo, hi):
    return f"[{lo},{'inf' if math.isinf(hi) else int(hi)})"


def bucket_of(length, edges=DEFAULT_BUCKET_EDGES):
    for lo, hi in zip(edges[:-1], edges[1:]):
        if lo <= length < hi:
            return bucket_label(lo, hi)
    return None


def hardness_profile(params, registry, samples, user_kind=UserModelKind.SEQ_MEAN,
                     edges=DEFAULT_BUCKET_EDGES):
    """Mean/std of user-item inner products per (profile-length bucket, role, polarity)."""
    by_id = {c.user_id: c for c in registry.clients}
    values = {}
    for rec in samples:
        client = by_id[rec.client_id]
        b = bucket_of(len(client.train_items), edges)
        if b is None:
            continue
        u = user_matrix(params, [client], user_kind)[0]
        for polarity, ids in (("positive", rec.positives), ("negative", rec.negatives)):
            sims = params.item_table[np.asarray(ids, dtype=np.int64)] @ u
            values.setdefault((b, Role(rec.role), polarity), []).extend(sims.tolist())
    stats = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        b = bucket_label(lo, hi)
        for role in (Role.BENIGN, Role.BYZANTINE):
            for polarity in ("positive", "negative"):
                vals = values.get((b, role, polarity), [])
                if vals:
                    arr = np.asarray(vals)
                    stats.append(BucketStat(b, role, polarity, float(arr.mean()),
                                            float(arr.std()), arr.size))
                else:
                    stats.append(BucketStat(b, role, polarity, math.nan, math.nan, 0))
    return HardnessProfile(tuple(stats))


def overall_similarity(params, registry, samples, role, polarity,
                       user_kind=UserModelKind.SEQ_MEAN):
    """Mean inner product over every logged sample of one role and polarity."""
    by_id = {c.user_id: c for c in registry.clients}
    total, count = 0.0, 0
    for rec in samples:
        if Role(rec.role) is not Role(role):
            continue
        u = user_matrix(params, [by_id[rec.client_id]], user_kind)[0]
        ids = rec.positives if polarity == "positive" else rec.negatives
        sims = params.item_table[np.asarray(ids, dtype=np.int64)] @ u
        total += float(sims.sum())
        count += sims.size
    return total / count if count else math.nan


# -- PCA ------------------------------------------------------------------------------

@dataclass(frozen=True)
class PcaProjection:
    coords: np.ndarray
    eigenvalues: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray


def top_eigenpairs(cov, k=2, tol=1e-9, max_iter=10_000, seed=0):
    """Leading eigenpairs of a symmetric PSD matrix by power iteration with deflation."""
    C = np.array(cov, dtype=np.float64)
    dim = C.shape[0]
    rng = np.random.default_rng(seed)
    start = rng.standard_normal(dim)
    vals, vecs = [], []
    for _ in range(min(k, dim)):
        v = start.copy()
        for prev in vecs:
            v -= (v @ prev) * prev
        nv = np.linalg.norm(v)
        v = v / nv if nv > 0 else np.eye(dim)[len(vecs)]
        lam = 0.0
        for _ in range(max_iter):
            w = C @ v
            nw = np.linalg.norm(w)
            if nw == 0.0:
                lam = 0.0
                break
            w /= nw
            if w @ v < 0:
                w = -w
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        lam = float(v @ C @ v)
        if lam < 0:
            lam = 0.0
        vals.append(lam)
        vecs.append(v)
        C -= lam * np.outer(v, v)
    return np.array(vals), np.array(vecs).T


def pca_project(rows, out_dim=2, tol=1e-9, max_iter=10_000, seed=0):
    """Project feature rows onto their top principal directions."""
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3 or X.shape[1] < 2:
        raise ValueError("PCA needs at least 3 rows and 2 columns")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    vals, vecs = top_eigenpairs(cov, out_dim, tol, max_iter, seed)
    total = float(np.trace(cov))
    explained = vals / total if total > 0 else np.zeros_like(vals)
    return PcaProjection(Xc @ vecs, vals, vecs, explained)


# -- CSV emitters ---------------------------------------------------------------------

def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x):
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def hardness_csv(profile):
    return _csv_text(["bucket", "role", "polarity", "mean", "std", "n"],
                     [[s.bucket, s.role.value, s.polarity, _fmt(s.mean), _fmt(s.std), s.n]
                      for s in profile.stats])


def pca_csv(client_ids, roles, projection):
    return _csv_text(["client", "role", "x", "y"],
                     [[cid, Role(r).value, _fmt(xy[0]), _fmt(xy[1] if xy.size > 1 else 0.0)]
                      for cid, r, xy in zip(client_ids, roles, projection.coords)])


def detector_accuracy_csv(accuracies):
    return _csv_text(["attack", "accuracy"], [[a, f"{acc:.3f}"] for a, acc in accuracies.items()])
