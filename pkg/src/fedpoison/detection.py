"""Supervised malicious-gradient detector.

Each client update is summarised next to the round-average update, a
small feedforward classifier is trained on labelled updates collected in
a first run, and a second run drops the updates it flags before
aggregation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedpoison.checkpoint import atomic_write_bytes, decode_tensors, encode_tensors
from fedpoison.errors import ConfigError
from fedpoison.model import SparseGradient

log = logging.getLogger(__name__)

HIDDEN = 32
N_POOLED = 6


def feature_dim(layout):
    return 2 * (layout.predictor_size + N_POOLED)


def _dense(update, layout):
    if isinstance(update, SparseGradient):
        return update.to_dense(layout)
    return np.asarray(update, dtype=np.float64)


def _pooled(emb, total_rows):
    """L2 norm, mean, std, max-abs of touched entries and touched-row fraction."""
    touched = np.any(emb != 0.0, axis=1)
    count = int(touched.sum())
    if count == 0:
        return [0.0, 0.0, 0.0, 0.0, 0.0]
    vals = emb[touched].ravel()
    return [float(np.linalg.norm(vals)), float(vals.mean()), float(vals.std()),
            float(np.abs(vals).max()), count / total_rows]


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def featurize(update, round_avg, layout):
    """Fixed-length summary of one update and the round average.

    Layout: ``[client predictor grad, client pooled stats, client-vs-average
    cosine, average predictor grad, average pooled stats, 0]``.
    """
    x = _dense(update, layout)
    a = np.asarray(round_avg, dtype=np.float64)
    off = layout.predictor_offset
    d = layout.dim
    x_emb = x[:off].reshape(layout.total_rows, d)
    a_emb = a[:off].reshape(layout.total_rows, d)
    client = list(x[off:]) + _pooled(x_emb, layout.total_rows) + [_cosine(x[:off], a[:off])]
    average = list(a[off:]) + _pooled(a_emb, layout.total_rows) + [0.0]
    return np.array(client + average, dtype=np.float64)


def featurize_raw(update, round_avg, layout):
    """Plain concatenation of the two dense vectors (only sensible for tiny models)."""
    return np.concatenate([_dense(update, layout), np.asarray(round_avg, dtype=np.float64)])


FEATURIZERS = {"stats": featurize, "raw": featurize_raw}


def featurizer(mode):
    try:
        return FEATURIZERS[mode]
    except KeyError:
        raise ConfigError(f"detector.features must be one of {sorted(FEATURIZERS)}, "
                          f"got {mode!r}") from None


@dataclass
class DetectorDataset:
    features: np.ndarray
    labels: np.ndarray

    @property
    def n_malicious(self):
        return int(self.labels.sum())


def balance_dataset(features, labels, seed=0):
    """Down-sample the majority class to the size of the minority class."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("detector dataset needs both normal and malicious updates")
    rng = np.random.default_rng([seed, 0xBA1])
    if neg.size > pos.size:
        neg = np.sort(rng.choice(neg, size=pos.size, replace=False))
    elif pos.size > neg.size:
        pos = np.sort(rng.choice(pos, size=neg.size, replace=False))
    keep = np.sort(np.concatenate([pos, neg]))
    return DetectorDataset(X[keep], y[keep])


@dataclass
class DetectorModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    threshold: float = 0.5
    holdout_accuracy: float = math.nan

    @property
    def input_dim(self):
        return self.w1.shape[1]

    def logits(self, features):
        Z = (np.atleast_2d(features) - self.feature_mean) / self.feature_scale
        return _forward(self.params(), Z)[0]

    def predict_proba(self, features):
        return _sigmoid(self.logits(features))

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def save(self, path):
        meta = {"threshold": self.threshold, "holdout_accuracy": self.holdout_accuracy,
                "hidden": int(self.w1.shape[0]), "input_dim": self.input_dim}
        arrays = dict(self.params(), feature_mean=self.feature_mean,
                      feature_scale=self.feature_scale)
        atomic_write_bytes(path, encode_tensors("detector", meta, arrays))

    @classmethod
    def load(cls, path):
        meta, a = decode_tensors(Path(path).read_bytes(), expect_kind="detector")
        return cls(a["w1"], a["b1"], a["w2"], a["b2"], a["feature_mean"], a["feature_scale"],
                   meta["threshold"], meta["holdout_accuracy"])


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _forward(p, Z):
    pre = Z @ p["w1"].T + p["b1"]
    hid = np.maximum(pre, 0.0)
    return hid @ p["w2"] + p["b2"][0], pre, hid


def loss_and_grads(p, Z, y):
    """Mean binary cross-entropy of the network and its parameter gradients."""
    logit, pre, hid = _forward(p, Z)
    y = np.asarray(y, dtype=np.float64)
    loss = float(np.mean(np.logaddexp(0.0, logit) - y * logit))
    dlogit = (_sigmoid(logit) - y) / y.size
    dpre = np.outer(dlogit, p["w2"]) * (pre > 0)
    grads = {
        "w2": dlogit @ hid,
        "b2": np.array([dlogit.sum()]),
        "w1": dpre.T @ Z,
        "b1": dpre.sum(axis=0),
    }
    return loss, grads


def init_detector_params(input_dim, seed=0, hidden=HIDDEN):
    rng = np.random.default_rng([seed, 0xDE7])
    lim1 = math.sqrt(6.0 / (input_dim + hidden))
    lim2 = math.sqrt(6.0 / (hidden + 1))
    return {
        "w1": rng.uniform(-lim1, lim1, (hidden, input_dim)),
        "b1": np.zeros(hidden),
        "w2": rng.uniform(-lim2, lim2, hidden),
        "b2": np.zeros(1),
    }


def accuracy(model, features, labels):
    if len(labels) == 0:
        return math.nan
    pred = (model.predict_proba(features) >= model.threshold).astype(np.int64)
    return float(np.mean(pred == np.asarray(labels)))


def train_detector(dataset, epochs=300, lr=0.01, seed=0, holdout=0.2, threshold=0.5):
    """Full-batch training with Adam-scaled gradient steps; reports held-out accuracy.

    Features are standardised with training-split statistics, which are
    stored in the model and applied at prediction time.
    """
    X = np.asarray(dataset.features, dtype=np.float64)
    y = np.asarray(dataset.labels, dtype=np.int64)
    if np.unique(y).size < 2:
        raise ValueError("detector training needs both classes")
    n = y.size
    rng = np.random.default_rng([seed, 0x5917])
    order = rng.permutation(n)
    n_test = max(1, int(round(holdout * n))) if n > 1 else 0
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    Xtr, ytr = X[train_idx], y[train_idx]
    mean = Xtr.mean(axis=0)
    scale = Xtr.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (Xtr - mean) / scale

    p = init_detector_params(X.shape[1], seed)
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v = {k: np.zeros_like(val) for k, val in p.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, epochs + 1):
        _, g = loss_and_grads(p, Z, ytr)
        for k in p:
            m[k] = b1 * m[k] + (1 - b1) * g[k]
            v[k] = b2 * v[k] + (1 - b2) * g[k] ** 2
            p[k] = p[k] - lr * (m[k] / (1 - b1 ** t)) / (np.sqrt(v[k] / (1 - b2 ** t)) + eps)

    model = DetectorModel(p["w1"], p["b1"], p["w2"], p["b2"], mean, scale, threshold)
    model.holdout_accuracy = accuracy(model, X[test_idx], y[test_idx])
    return model


def detect_and_filter(updates, round_avg, model, layout, threshold=None, features=featurize):
    """Split ``(client_id, update)`` pairs into kept updates and flagged ids.

    If every update is flagged, all are kept so aggregation never starves.
    """
    theta = model.threshold if threshold is None else threshold
    if not updates:
        return [], []
    feats = np.stack([features(u, round_avg, layout) for _, u in updates])
    if feats.shape[1] != model.input_dim:
        raise ValueError(f"detector expects {model.input_dim} features, got {feats.shape[1]}")
    probs = model.predict_proba(feats)
    flagged = [cid for (cid, _), pr in zip(updates, probs) if pr >= theta]
    if len(flagged) == len(updates):
        log.warning("detector flagged every update in the round; keeping all")
        return list(updates), flagged
    kept = [(cid, u) for (cid, u), pr in zip(updates, probs) if pr < theta]
    return kept, flagged
