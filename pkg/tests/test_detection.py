import logging

import numpy as np
import pytest

from fedpoison.detection import (DetectorDataset, DetectorModel, accuracy, balance_dataset,
                                 detect_and_filter, feature_dim, featurize, featurize_raw,
                                 init_detector_params, loss_and_grads, train_detector)
from fedpoison.model import PredictorKind, SparseGradient, init_params


def layout(predictor=PredictorKind.DOT, d=3):
    return init_params(4, 6, d=d, predictor_kind=predictor).layout


def fixed_model(input_dim, logit_of):
    """Detector whose logit is ``logit_of`` times raw feature 1."""
    w1 = np.zeros((2, input_dim))
    w1[0, 1], w1[1, 1] = 1.0, -1.0
    return DetectorModel(w1, np.zeros(2), np.array([logit_of, -logit_of]), np.zeros(1),
                         np.zeros(input_dim), np.ones(input_dim))


class TestFeaturize:
    @pytest.mark.parametrize("predictor", list(PredictorKind))
    def test_zero(self, predictor):
        lay = layout(predictor)
        f = featurize(np.zeros(lay.size), np.zeros(lay.size), lay)
        assert f.shape == (feature_dim(lay),)
        assert not f.any()

    def test_identical_cosine(self, rng):
        lay = layout()
        g = rng.standard_normal(lay.size)
        f = featurize(g, g, lay)
        p = lay.predictor_size
        assert f[p + 5] == pytest.approx(1.0)
        assert f[-1] == 0.0

    def test_stats_oracle(self, rng):
        lay = layout(PredictorKind.MLP)
        x = np.zeros(lay.size)
        a = rng.standard_normal(lay.size)
        rows = rng.choice(lay.total_rows, size=3, replace=False)
        emb = x[:lay.predictor_offset].reshape(lay.total_rows, lay.dim)
        emb[rows] = rng.standard_normal((3, lay.dim))
        x[lay.predictor_offset:] = rng.standard_normal(lay.predictor_size)
        f = featurize(x, a, lay)
        p = lay.predictor_size
        vals = emb[rows].ravel()
        np.testing.assert_array_equal(f[:p], x[lay.predictor_offset:])
        np.testing.assert_allclose(f[p:p + 5], [np.sqrt(np.sum(vals ** 2)), vals.mean(),
                                                vals.std(), np.abs(vals).max(),
                                                3 / lay.total_rows], rtol=1e-12)
        ex, ea = x[:lay.predictor_offset], a[:lay.predictor_offset]
        cos = ex @ ea / np.linalg.norm(ex) / np.linalg.norm(ea)
        assert f[p + 5] == pytest.approx(cos, rel=1e-12)
        np.testing.assert_array_equal(f[p + 6:2 * p + 6], a[lay.predictor_offset:])
        assert f[2 * p + 10] == 1.0  # every row of the random average is touched

    def test_sparse_equals_dense(self, rng):
        lay = layout()
        g = SparseGradient(np.array([1]), rng.standard_normal((1, 3)), np.array([0, 4]),
                           rng.standard_normal((2, 3)), np.zeros(0), 2, 0.1)
        avg = rng.standard_normal(lay.size)
        np.testing.assert_array_equal(featurize(g, avg, lay), featurize(g.to_dense(lay), avg, lay))

    def test_raw(self, rng):
        lay = layout()
        g, a = rng.standard_normal(lay.size), rng.standard_normal(lay.size)
        assert featurize_raw(g, a, lay).shape == (2 * lay.size,)


class TestBalance:
    def test_ratio(self, rng):
        X = rng.standard_normal((50, 3))
        y = np.r_[np.ones(7), np.zeros(43)].astype(int)
        ds = balance_dataset(X, y, seed=1)
        assert ds.n_malicious == 7 and len(ds.labels) == 14

    def test_single_class(self):
        with pytest.raises(ValueError):
            balance_dataset(np.zeros((3, 2)), [0, 0, 0])


class TestTraining:
    def test_gradient_fd(self, rng):
        p = init_detector_params(5, seed=3, hidden=4)
        p["b1"] = rng.standard_normal(4) * 0.1
        Z = rng.standard_normal((12, 5))
        y = rng.integers(0, 2, 12)
        _, g = loss_and_grads(p, Z, y)
        h = 1e-6
        for name, arr in p.items():
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                lp, _ = loss_and_grads(p, Z, y)
                arr[idx] = old - h
                lm, _ = loss_and_grads(p, Z, y)
                arr[idx] = old
                fd = (lp - lm) / (2 * h)
                assert abs(fd - g[name][idx]) <= 1e-4 * max(abs(fd), abs(g[name][idx]), 1e-5)

    def test_separable(self, rng):
        X = rng.standard_normal((200, 4))
        y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int)
        X[:, 0] += np.where(y == 1, 1.0, -1.0)
        model = train_detector(DetectorDataset(X, y), epochs=200, seed=0)
        assert model.holdout_accuracy == 1.0

    def test_random_labels(self):
        accs = []
        for seed in range(5):
            r = np.random.default_rng(seed)
            X = r.standard_normal((400, 4))
            y = r.integers(0, 2, 400)
            accs.append(train_detector(DetectorDataset(X, y), epochs=100, seed=seed)
                        .holdout_accuracy)
        assert abs(np.mean(accs) - 0.5) <= 0.1

    def test_zero_epochs_deterministic(self, rng):
        X = rng.standard_normal((30, 3))
        y = np.r_[np.ones(15), np.zeros(15)].astype(int)
        a = train_detector(DetectorDataset(X, y), epochs=0, seed=4)
        b = train_detector(DetectorDataset(X, y), epochs=0, seed=4)
        init = init_detector_params(3, seed=4)
        np.testing.assert_array_equal(a.w1, init["w1"])
        assert a.holdout_accuracy == b.holdout_accuracy

    def test_output_range_and_single_class(self, rng):
        X = rng.standard_normal((20, 3))
        y = np.r_[np.ones(10), np.zeros(10)].astype(int)
        model = train_detector(DetectorDataset(X, y), epochs=20)
        pr = model.predict_proba(X * 100)
        assert ((pr >= 0) & (pr <= 1)).all()
        assert accuracy(model, X[:0], y[:0]) != accuracy(model, X[:0], y[:0])  # nan
        with pytest.raises(ValueError):
            train_detector(DetectorDataset(X, np.zeros(20, dtype=int)))

    def test_checkpoint_roundtrip(self, rng, tmp_path):
        X = rng.standard_normal((20, 3))
        y = np.r_[np.ones(10), np.zeros(10)].astype(int)
        model = train_detector(DetectorDataset(X, y), epochs=10)
        model.save(tmp_path / "det.bin")
        back = DetectorModel.load(tmp_path / "det.bin")
        np.testing.assert_array_equal(back.predict_proba(X), model.predict_proba(X))
        assert back.holdout_accuracy == model.holdout_accuracy


class TestFilter:
    def setup_method(self):
        self.lay = layout()
        self.F = feature_dim(self.lay)

    def updates(self, firsts):
        out = []
        for cid, v in enumerate(firsts):
            g = np.zeros(self.lay.size)
            g[:self.lay.dim] = v  # whole first user row
            out.append((cid, g))
        return out

    def test_mixed(self):
        # with the dot predictor feature 1 is the mean of the touched embedding entries
        model = fixed_model(self.F, 1.0)
        ups = self.updates([np.log(9.0), -np.log(9.0)])
        avg = np.zeros(self.lay.size)
        probs = model.predict_proba(np.stack([featurize(u, avg, self.lay) for _, u in ups]))
        kept, flagged = detect_and_filter(ups, avg, model, self.lay, threshold=0.5)
        assert probs[0] == pytest.approx(0.9)
        assert flagged == [0] and [c for c, _ in kept] == [1]

    def test_threshold_above_max(self):
        model = fixed_model(self.F, 1.0)
        ups = self.updates([1.0, 2.0])
        kept, flagged = detect_and_filter(ups, np.zeros(self.lay.size), model, self.lay, 1.0 + 1e-9)
        assert flagged == [] and len(kept) == 2

    def test_all_flagged_keeps_all(self, caplog):
        model = fixed_model(self.F, 1.0)
        ups = self.updates([1.0, 2.0])
        with caplog.at_level(logging.WARNING):
            kept, flagged = detect_and_filter(ups, np.zeros(self.lay.size), model, self.lay, 0.0)
        assert len(kept) == 2 and flagged == [0, 1]
        assert "keeping all" in caplog.text

    def test_dim_mismatch(self):
        model = fixed_model(self.F + 1, 1.0)
        with pytest.raises(ValueError):
            detect_and_filter(self.updates([1.0]), np.zeros(self.lay.size), model, self.lay)
