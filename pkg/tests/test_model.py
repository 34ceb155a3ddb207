import math
import zlib

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpoison.checkpoint import load_model, save_model
from fedpoison.dataset import ClientProfile
from fedpoison.model import (AdamState, ModelParams, ParamLayout, PredictorKind,
                             adam_apply, bpr_gradients, bpr_loss, init_params, pair_loss, score,
                             score_all, score_items, user_embed)


def random_instance(rng, predictor, user_kind, d=4, users=5, items=12):
    params = init_params(users, items, d, predictor, seed=int(rng.integers(1 << 30)))
    params.vector[:] = rng.normal(0, 1.0, params.vector.size)
    profile = ClientProfile(int(rng.integers(users)),
                            tuple(rng.integers(0, items, size=int(rng.integers(1, 5))).tolist()),
                            0, 1)
    k = int(rng.integers(1, 4))
    pos = rng.integers(0, items, size=k)
    neg = rng.integers(0, items, size=k)
    return params, profile, pos, neg


def near_relu_kink(params, profile, items, user_kind, margin=1e-3):
    if params.predictor_kind is not PredictorKind.MLP:
        return False
    w1, b1, _, _ = params.mlp()
    d = params.dim
    u = user_embed(params, profile, user_kind)
    pre = params.item_table[items] @ w1[:, d:].T + w1[:, :d] @ u + b1
    return bool(np.abs(pre).min() < margin)


def finite_difference(params, profile, pos, neg, user_kind, h=1e-5):
    base = params.vector.copy()
    grad = np.zeros_like(base)
    for c in range(base.size):
        for sign in (1, -1):
            v = base.copy()
            v[c] += sign * h
            grad[c] += sign * pair_loss(ModelParams(params.layout, v), profile, pos, neg, user_kind)
        grad[c] /= 2 * h
    return grad


def max_rel_err(a, b, floor=1e-5):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


class TestInit:
    def test_deterministic(self):
        a = init_params(10, 20, 8, "mlp", seed=1)
        b = init_params(10, 20, 8, "mlp", seed=1)
        assert np.array_equal(a.vector, b.vector)

    def test_seeds_differ(self):
        assert not np.array_equal(init_params(10, 20, 8, seed=1).vector,
                                  init_params(10, 20, 8, seed=2).vector)

    def test_default_dim(self):
        p = init_params(3, 4)
        assert p.user_table.shape == (3, 64) and p.item_table.shape == (4, 64)
        assert p.predictor.size == 0

    def test_mlp_shapes(self):
        p = init_params(3, 4, 8, "mlp")
        w1, b1, w2, b2 = p.mlp()
        assert w1.shape == (8, 16) and b1.shape == (8,) and w2.shape == (8,) and b2.shape == (1,)
        assert np.abs(w1).max() <= math.sqrt(6 / 24)

    def test_embedding_std(self):
        p = init_params(200, 200, 64, seed=0)
        assert abs(p.item_table.std() - 0.01) < 5e-4


class TestScoring:
    def setup_method(self):
        self.p = init_params(6, 3, 2)
        self.p.item_table[:] = [[1, 0], [3, 2], [3, 4]]

    def test_seqmean(self):
        prof = ClientProfile(0, (0, 1), 2, 2)
        assert user_embed(self.p, prof).tolist() == [2.0, 1.0]
        assert user_embed(self.p, ClientProfile(0, (1,), 2, 2)).tolist() == [3.0, 2.0]

    def test_seqmean_empty(self):
        with pytest.raises(ValueError):
            user_embed(self.p, ClientProfile(0, (), 2, 2))

    def test_id_embedding(self):
        self.p.user_table[5] = [7, 8]
        assert user_embed(self.p, ClientProfile(5, (0,), 1, 2), "id").tolist() == [7.0, 8.0]

    def test_dot(self):
        assert score(self.p, [1, 2], 2) == 11.0
        assert score(self.p, [0, 0], 1) == 0.0

    def test_zero_mlp(self):
        p = init_params(2, 3, 2, "mlp")
        p.predictor[:] = 0.0
        for i in range(3):
            assert score(p, [0.3, -1.0], i) == 0.0

    def test_score_all_matches_score(self, rng):
        for kind in ("dot", "mlp"):
            p = init_params(4, 7, 3, kind, seed=2)
            p.vector[:] = rng.normal(size=p.vector.size)
            U = rng.normal(size=(5, 3))
            S = score_all(p, U, chunk=2)
            for r in range(5):
                np.testing.assert_allclose(S[r], score_items(p, U[r], range(7)), rtol=1e-12)


class TestBprLoss:
    @pytest.mark.parametrize("x", [-50.0, 0.0, 3.7, 1e6])
    def test_equal_scores_ln2(self, x):
        assert abs(bpr_loss(x, x) - math.log(2)) < 1e-12

    def test_large_margin(self):
        expected = float(mpmath.log(1 + mpmath.e ** -20))
        assert expected == pytest.approx(2.0611536e-9, rel=1e-6)
        assert bpr_loss(20.0, 0.0) == pytest.approx(expected, rel=1e-12)

    def test_wrong_order(self):
        expected = float(mpmath.log(1 + mpmath.e ** 2))
        assert expected == pytest.approx(2.126928, abs=1e-6)
        assert bpr_loss(0.0, 2.0) == pytest.approx(expected, rel=1e-12)

    def test_nan(self):
        with pytest.raises(ValueError):
            bpr_loss(float("nan"), 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-30, 30), st.floats(-30, 30))
    def test_nonneg_and_decreasing(self, a, b):
        assert bpr_loss(a, b) >= 0
        if a > b:
            assert bpr_loss(a + 1, b) <= bpr_loss(a, b)


class TestGradients:
    def test_equal_scores_half(self):
        p = init_params(1, 2, 2)
        p.item_table[:] = [[1.0, 0.0], [1.0, 0.0]]
        p.user_table[0] = [2.0, 1.0]
        p.item_table[1] = [0.0, 2.0]  # both score 2
        prof = ClientProfile(0, (0,), 1, 1)
        g = bpr_gradients(p, prof, [0], [1], "id")
        np.testing.assert_allclose(g.item_rows[0], -0.5 * p.user_table[0])
        np.testing.assert_allclose(g.item_rows[1], 0.5 * p.user_table[0])

    def test_positive_row_is_coef_times_u(self, rng):
        p = init_params(3, 6, 4, seed=1)
        p.vector[:] = rng.normal(size=p.vector.size)
        prof = ClientProfile(1, (0,), 1, 2)
        u = p.user_table[1]
        g = bpr_gradients(p, prof, [2], [4], "id")
        dyp = -1.0 / (1.0 + math.exp(p.item_table[2] @ u - p.item_table[4] @ u))
        np.testing.assert_allclose(g.item_rows[2], dyp * u, rtol=1e-12)

    def test_single_pair_sparsity(self, rng):
        p = init_params(3, 6, 4, seed=1)
        g = bpr_gradients(p, ClientProfile(2, (0, 1), 3, 4), [1], [5], "id")
        assert g.user_ids.tolist() == [2]
        assert len(g.item_ids) <= 2

    @pytest.mark.parametrize("predictor", ["dot", "mlp"])
    @pytest.mark.parametrize("user_kind", ["id", "seqmean"])
    def test_finite_differences(self, predictor, user_kind):
        rng = np.random.default_rng(zlib.crc32(f"{predictor}-{user_kind}".encode()))
        checked = 0
        while checked < 25:
            params, prof, pos, neg = random_instance(rng, predictor, user_kind)
            # central differences are meaningless across a ReLU kink
            if near_relu_kink(params, prof, np.concatenate([pos, neg]), user_kind):
                continue
            checked += 1
            g = bpr_gradients(params, prof, pos, neg, user_kind)
            assert g.is_finite()
            fd = finite_difference(params, prof, pos, neg, user_kind)
            assert max_rel_err(g.to_dense(params.layout), fd) < 1e-4

    def test_loss_reported(self, rng):
        params, prof, pos, neg = random_instance(rng, "dot", "seqmean")
        g = bpr_gradients(params, prof, pos, neg, "seqmean")
        assert g.loss == pytest.approx(pair_loss(params, prof, pos, neg, "seqmean"))


class TestAdam:
    def test_first_step(self):
        p = init_params(1, 1, 1)
        p.vector[:] = 0.0
        state = AdamState.zeros(p.vector.size)
        new, st1 = adam_apply(state, p, np.ones(p.vector.size))
        # m_hat = v_hat = 1 -> delta = -lr / (1 + eps)
        np.testing.assert_allclose(new.vector, -1e-3 / (1 + 1e-8), rtol=1e-15)
        assert st1.step_count == 1 and np.all(st1.second_moment >= 0)

    def test_zero_gradient_from_zero_state(self, rng):
        p = init_params(3, 4, 2, seed=3)
        new, st1 = adam_apply(AdamState.zeros(p.vector.size), p, np.zeros(p.vector.size))
        assert np.array_equal(new.vector, p.vector)
        assert st1.step_count == 1

    def test_two_identical_steps(self):
        p = init_params(1, 1, 1)
        state = AdamState.zeros(p.vector.size)
        g = np.full(p.vector.size, 0.37)
        p1, s1 = adam_apply(state, p, g)
        p2, _ = adam_apply(s1, p1, g)
        # constant gradient: m_hat = g and v_hat = g^2 at every step
        d1 = p1.vector - p.vector
        d2 = p2.vector - p1.vector
        np.testing.assert_allclose(np.abs(d2), np.abs(d1), atol=1e-6)

    def test_recurrence_by_hand(self):
        g = [0.5, -1.0, 2.0]
        theta, m, v = 0.3, 0.0, 0.0
        p = init_params(1, 1, 1)
        p.vector[:] = theta
        state = AdamState.zeros(p.vector.size)
        for t, gt in enumerate(g, start=1):
            m = 0.9 * m + 0.1 * gt
            v = 0.999 * v + 0.001 * gt * gt
            theta -= 1e-3 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            p, state = adam_apply(state, p, np.full(p.vector.size, gt))
        np.testing.assert_allclose(p.vector, theta, rtol=1e-13)

    def test_inputs_untouched(self):
        p = init_params(2, 2, 2, seed=0)
        before = p.vector.copy()
        state = AdamState.zeros(p.vector.size)
        adam_apply(state, p, np.ones(p.vector.size))
        assert np.array_equal(p.vector, before) and state.step_count == 0

    def test_shape_mismatch(self):
        p = init_params(2, 2, 2)
        with pytest.raises(ValueError):
            adam_apply(AdamState.zeros(p.vector.size), p, np.ones(3))


@pytest.mark.parametrize("kind", ["dot", "mlp"])
def test_checkpoint_roundtrip(tmp_path, kind):
    p = init_params(3, 5, 4, kind, seed=9)
    path = tmp_path / "m.ckpt"
    save_model(path, p)
    q = load_model(path)
    assert q == p and q.layout == p.layout
    raw = path.read_bytes()
    assert raw[:8] == b"FPSIMCK\x00"
    assert raw.endswith(p.vector.astype("<f8").tobytes())


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "x"
    path.write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        load_model(path)


def test_layout_offsets():
    lay = ParamLayout(2, 3, 4, PredictorKind.MLP)
    assert lay.item_offset == 8 and lay.predictor_offset == 20
    assert lay.size == 20 + 4 * 8 + 4 + 4 + 1
