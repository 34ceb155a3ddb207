import csv
import io
import math

import numpy as np
import pytest

from fedpoison.dataset import ClientProfile, ClientRegistry, Role
from fedpoison.evaluation import (DEFAULT_BUCKET_EDGES, SampleRecord, bucket_of, evaluate_epoch,
                                  hardness_csv, hardness_profile, hr_at_k, ndcg_at_k,
                                  overall_similarity, pca_csv, pca_project, rank_clients,
                                  rank_from_counts, rank_test_item, top_eigenpairs, user_matrix)
from fedpoison.model import ModelParams, ParamLayout, UserModelKind, init_params, score_all


def client(uid, train, val, test, role=Role.BENIGN):
    return ClientProfile(uid, tuple(train), val, test, role, 5)


def params_with_items(item_rows, num_users=1):
    item_rows = np.asarray(item_rows, dtype=np.float64)
    lay = ParamLayout(num_users, item_rows.shape[0], item_rows.shape[1])
    vec = np.zeros(lay.size)
    p = ModelParams(lay, vec)
    p.item_table[:] = item_rows
    return p


def oracle_rank(scores, target, excluded):
    s = scores[target]
    cand = [j for j in range(len(scores)) if j != target and j not in excluded]
    greater = sum(1 for j in cand if scores[j] > s)
    ties = sum(1 for j in cand if scores[j] == s)
    return 1 + greater + ties // 2


class TestMetrics:
    @pytest.mark.parametrize("rank", range(1, 21))
    def test_definitions(self, rank):
        assert hr_at_k(rank, 5) == (1 if rank <= 5 else 0)
        expected = 1.0 / math.log2(rank + 1) if rank <= 5 else 0.0
        assert ndcg_at_k(rank, 5) == expected

    def test_examples(self):
        assert (hr_at_k(1), ndcg_at_k(1)) == (1, 1.0)
        assert ndcg_at_k(3) == 0.5
        assert (hr_at_k(6), ndcg_at_k(6)) == (0, 0.0)

    @pytest.mark.parametrize("bad", [(0, 5), (1, 0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            hr_at_k(*bad)
        with pytest.raises(ValueError):
            ndcg_at_k(*bad)

    def test_ndcg_range(self):
        for k in range(1, 8):
            for r in range(1, 30):
                v = ndcg_at_k(r, k)
                assert v == 0.0 or 1 / math.log2(k + 1) - 1e-15 <= v <= 1.0
                assert (hr_at_k(r, k) == 0) == (v == 0.0)

    def test_rank_from_counts(self):
        assert rank_from_counts(0, 0) == 1
        assert rank_from_counts(2, 3) == 4


class TestRanking:
    def test_unique_max_and_min(self):
        # user = mean of item 0 row (profile), scores are item rows . u
        rows = np.zeros((12, 1))
        rows[0] = 1.0
        rows[2:12, 0] = np.arange(10, dtype=float)  # item 11 is the max, item 2 the min
        p = params_with_items(rows)
        top = client(0, [0], 1, 11)
        assert rank_test_item(p, top).rank == 1
        bottom = client(0, [0], 1, 2)
        assert rank_test_item(p, bottom).rank == 10

    def test_matches_sort_oracle(self, rng):
        for _ in range(30):
            n_items = int(rng.integers(10, 60))
            d = 3
            rows = np.round(rng.standard_normal((n_items, d)), 1)
            p = params_with_items(rows, num_users=4)
            clients = []
            for uid in range(4):
                perm = rng.permutation(n_items)
                clients.append(client(uid, perm[:4].tolist(), int(perm[4]), int(perm[5])))
            for target in ("test", "val"):
                for excl in (True, False):
                    res = rank_clients(p, clients, target=target, exclude_seen=excl)
                    S = score_all(p, user_matrix(p, clients))
                    for c, r, scores in zip(clients, res, S):
                        t = c.test_item if target == "test" else c.val_item
                        ex = set()
                        if excl:
                            ex = set(c.train_items) | ({c.val_item} if target == "test" else set())
                        assert r.rank == oracle_rank(scores, t, ex)

    def test_monotone_invariance(self, rng):
        p = init_params(5, 40, d=4, seed=3)
        clients = [client(u, [u, u + 5, u + 10], u + 20, u + 30) for u in range(5)]
        base = [r.rank for r in rank_clients(p, clients)]
        scaled = p.copy()
        scaled.item_table[:] *= 3.0  # SeqMean scores scale by 9
        assert [r.rank for r in rank_clients(scaled, clients)] == base

    def test_rank_bounds(self, rng):
        p = init_params(3, 30, d=4, seed=1)
        clients = [client(u, [u, u + 3], u + 10, u + 20) for u in range(3)]
        for r in rank_clients(p, clients):
            assert 1 <= r.rank <= 30 - 3

    def test_bad_target(self):
        p = init_params(1, 10, d=2)
        with pytest.raises(ValueError):
            rank_clients(p, [client(0, [1], 2, 3)], target="train")

    def test_id_user_model(self):
        p = params_with_items(np.eye(3), num_users=1)
        p.user_table[0] = [0.0, 0.0, 1.0]
        c = client(0, [0], 1, 2)
        assert rank_test_item(p, c, UserModelKind.ID).rank == 1


class TestEvaluateEpoch:
    def test_all_rank_one(self):
        rows = np.array([[1.0], [0.0], [2.0], [-1.0]])
        p = params_with_items(rows, num_users=2)
        reg = ClientRegistry((client(0, [0], 1, 2), client(1, [0], 1, 2)), 0.0, 0, 4)
        assert evaluate_epoch(p, reg) == (1.0, 1.0)

    def test_half_hits_and_benign_only(self):
        n_items = 20
        rows = np.zeros((n_items, 1))
        rows[0] = 1.0
        rows[1:, 0] = -np.arange(1, n_items)  # lower id means higher score
        p = params_with_items(rows, num_users=3)
        hit = client(0, [0], 19, 1)
        miss = client(1, [0], 19, 15)
        byz = client(2, [0], 19, 18, Role.BYZANTINE)
        reg = ClientRegistry((hit, miss, byz), 0.3, 0, n_items)
        hr, ndcg = evaluate_epoch(p, reg)
        assert hr == 0.5
        assert ndcg == 0.5

    def test_no_benign(self):
        p = init_params(1, 5, d=2)
        reg = ClientRegistry((client(0, [0], 1, 2, Role.BYZANTINE),), 1.0, 0, 5)
        with pytest.raises(ValueError):
            evaluate_epoch(p, reg)


class TestHardness:
    def test_bucket_of(self):
        assert bucket_of(1) == "[1,5)"
        assert bucket_of(4) == "[1,5)"
        assert bucket_of(5) == "[5,10)"
        assert bucket_of(500) == "[200,inf)"
        assert bucket_of(0) is None
        assert len(DEFAULT_BUCKET_EDGES) == 8

    def test_single_pair(self):
        rows = np.array([[1.0, 0.0], [0.5, 2.0], [-1.0, 3.0]])
        p = params_with_items(rows)
        c = client(0, [0], 1, 2)
        reg = ClientRegistry((c,), 0.0, 0, 3)
        prof = hardness_profile(p, reg, [SampleRecord(0, Role.BENIGN, (1,), (2,))])
        pos = prof.get("[1,5)", Role.BENIGN, "positive")
        neg = prof.get("[1,5)", Role.BENIGN, "negative")
        assert (pos.mean, pos.std, pos.n) == (0.5, 0.0, 1)
        assert (neg.mean, neg.std, neg.n) == (-1.0, 0.0, 1)
        empty = prof.get("[5,10)", Role.BYZANTINE, "negative")
        assert empty.n == 0 and math.isnan(empty.mean)

    def test_matches_recomputation(self, rng):
        p = init_params(30, 60, d=4, seed=2)
        clients = []
        for uid in range(30):
            length = int(rng.integers(1, 25))
            items = rng.choice(60, size=length + 2, replace=False)
            role = Role.BYZANTINE if uid % 5 == 0 else Role.BENIGN
            clients.append(client(uid, items[:length].tolist(), int(items[-2]), int(items[-1]),
                                  role))
        reg = ClientRegistry(tuple(clients), 0.2, 0, 60)
        samples = [SampleRecord(c.user_id, c.role, tuple(rng.integers(0, 60, 3).tolist()),
                                tuple(rng.integers(0, 60, 3).tolist())) for c in clients]
        prof = hardness_profile(p, reg, samples)
        for s in prof.stats:
            vals = []
            for c, rec in zip(clients, samples):
                if c.role is not s.role or bucket_of(len(c.train_items)) != s.bucket:
                    continue
                u = p.item_table[list(c.train_items)].mean(axis=0)
                ids = rec.positives if s.polarity == "positive" else rec.negatives
                vals.extend((p.item_table[list(ids)] @ u).tolist())
            assert s.n == len(vals)
            if vals:
                assert s.mean == pytest.approx(np.mean(vals), rel=1e-12, abs=1e-15)
                assert s.std == pytest.approx(np.std(vals), rel=1e-9, abs=1e-15)
        overall = overall_similarity(p, reg, samples, Role.BENIGN, "negative")
        direct = [v for c, rec in zip(clients, samples) if c.role is Role.BENIGN
                  for v in p.item_table[list(rec.negatives)]
                  @ p.item_table[list(c.train_items)].mean(axis=0)]
        assert overall == pytest.approx(np.mean(direct), rel=1e-12)

    def test_csv(self):
        rows = np.array([[1.0], [2.0], [3.0]])
        p = params_with_items(rows)
        reg = ClientRegistry((client(0, [0], 1, 2),), 0.0, 0, 3)
        text = hardness_csv(hardness_profile(p, reg, [SampleRecord(0, Role.BENIGN, (1,), (2,))]))
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == ["bucket", "role", "polarity", "mean", "std", "n"]
        assert ["[1,5)", "benign", "positive", "2.0", "0.0", "1"] in rows


class TestPca:
    def test_line_explained_variance(self):
        t = np.linspace(-2, 3, 11)
        X = np.stack([t, 2 * t + 1], axis=1)
        proj = pca_project(X)
        assert abs(proj.explained_variance[0] - 1.0) < 1e-9

    def test_isotropic(self):
        X = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        proj = pca_project(X)
        assert abs(proj.eigenvalues[0] - proj.eigenvalues[1]) < 1e-9

    def test_against_eigh(self, rng):
        for _ in range(20):
            X = rng.standard_normal((50, 8))
            Xc = X - X.mean(axis=0)
            cov = Xc.T @ Xc / 49
            ref = np.sort(np.linalg.eigvalsh(cov))[::-1]
            vals, _ = top_eigenpairs(cov, k=8)
            np.testing.assert_allclose(vals, ref, rtol=1e-6)

    def test_sorted_nonnegative_deterministic(self, rng):
        X = rng.standard_normal((20, 5))
        a, b = pca_project(X), pca_project(X)
        assert np.array_equal(a.coords, b.coords)
        assert a.eigenvalues[0] >= a.eigenvalues[1] >= 0

    def test_rank_deficient(self):
        X = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        proj = pca_project(X)
        assert proj.eigenvalues[1] == pytest.approx(0.0, abs=1e-12)

    def test_reconstruction_bounded_by_trailing_mass(self, rng):
        X = rng.standard_normal((40, 6)) * np.array([5, 3, 1, 0.5, 0.2, 0.1])
        proj = pca_project(X)
        Xc = X - X.mean(axis=0)
        recon = proj.coords @ proj.components.T
        err = np.sum((Xc - recon) ** 2) / (X.shape[0] - 1)
        cov = Xc.T @ Xc / (X.shape[0] - 1)
        trailing = np.sort(np.linalg.eigvalsh(cov))[::-1][2:].sum()
        assert err == pytest.approx(trailing, rel=1e-6)

    def test_too_small(self):
        with pytest.raises(ValueError):
            pca_project(np.zeros((2, 4)))

    def test_csv(self, rng):
        proj = pca_project(rng.standard_normal((4, 3)))
        text = pca_csv([3, 1, 2, 0], [Role.BENIGN] * 3 + [Role.BYZANTINE], proj)
        lines = text.splitlines()
        assert lines[0] == "client,role,x,y"
        assert lines[4].startswith("0,byzantine,")
