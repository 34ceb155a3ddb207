"""Embedding recommender: parameters, scoring, BPR loss and gradients, Adam.

All parameters live in one flat float64 vector (users, then items, then
the predictor). Tables are reshaped views into it, so densified client
updates, aggregation and the optimizer all work on the same layout.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from fedpoison import kernels
from fedpoison.errors import ConfigError


class PredictorKind(str, enum.Enum):
    DOT = "dot"
    MLP = "mlp"


class UserModelKind(str, enum.Enum):
    ID = "id"
    SEQ_MEAN = "seqmean"


@dataclass(frozen=True)
class ParamLayout:
    num_users: int
    num_items: int
    dim: int
    predictor: PredictorKind = PredictorKind.DOT

    @property
    def predictor_size(self):
        if self.predictor is PredictorKind.DOT:
            return 0
        d = self.dim
        return d * 2 * d + d + d + 1

    @property
    def user_offset(self):
        return 0

    @property
    def item_offset(self):
        return self.num_users * self.dim

    @property
    def predictor_offset(self):
        return (self.num_users + self.num_items) * self.dim

    @property
    def size(self):
        return self.predictor_offset + self.predictor_size

    @property
    def total_rows(self):
        return self.num_users + self.num_items

    def split(self, vec):
        """Views ``(user_table, item_table, predictor_flat)`` into ``vec``."""
        d = self.dim
        users = vec[: self.item_offset].reshape(self.num_users, d)
        items = vec[self.item_offset: self.predictor_offset].reshape(self.num_items, d)
        pred = vec[self.predictor_offset:]
        return users, items, pred

    def mlp_views(self, pred):
        """``(W1, b1, w2, b2)`` views of a flat MLP parameter (or gradient) vector."""
        d = self.dim
        w1 = pred[: 2 * d * d].reshape(d, 2 * d)
        b1 = pred[2 * d * d: 2 * d * d + d]
        w2 = pred[2 * d * d + d: 2 * d * d + 2 * d]
        b2 = pred[2 * d * d + 2 * d:]
        return w1, b1, w2, b2


class ModelParams:
    """Shared federated model state backed by a single flat vector."""

    def __init__(self, layout, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (layout.size,):
            raise ValueError(f"expected vector of size {layout.size}, got {vector.shape}")
        self.layout = layout
        self.vector = vector
        self.user_table, self.item_table, self.predictor = layout.split(vector)

    @property
    def dim(self):
        return self.layout.dim

    @property
    def predictor_kind(self):
        return self.layout.predictor

    def mlp(self):
        return self.layout.mlp_views(self.predictor)

    def copy(self):
        return ModelParams(self.layout, self.vector.copy())

    def __eq__(self, other):
        return (isinstance(other, ModelParams) and self.layout == other.layout
                and np.array_equal(self.vector, other.vector))

    def __repr__(self):
        lay = self.layout
        return (f"ModelParams(users={lay.num_users}, items={lay.num_items}, "
                f"dim={lay.dim}, predictor={lay.predictor.value})")


def init_params(num_users, num_items, d=64, predictor_kind=PredictorKind.DOT, seed=0,
                init_std=0.01):
    if num_users <= 0 or num_items <= 0 or d <= 0:
        raise ConfigError("num_users, num_items and d must be positive")
    layout = ParamLayout(num_users, num_items, d, PredictorKind(predictor_kind))
    rng = np.random.default_rng(seed)
    vec = np.zeros(layout.size)
    users, items, pred = layout.split(vec)
    users[:] = rng.normal(0.0, init_std, users.shape)
    items[:] = rng.normal(0.0, init_std, items.shape)
    if layout.predictor is PredictorKind.MLP:
        w1, b1, w2, b2 = layout.mlp_views(pred)
        lim1 = math.sqrt(6.0 / (2 * d + d))
        w1[:] = rng.uniform(-lim1, lim1, w1.shape)
        lim2 = math.sqrt(6.0 / (d + 1))
        w2[:] = rng.uniform(-lim2, lim2, w2.shape)
    return ModelParams(layout, vec)


def user_embed(params, profile, kind=UserModelKind.SEQ_MEAN):
    """User embedding from the ID table or as the mean of profile item rows."""
    if UserModelKind(kind) is UserModelKind.ID:
        return params.user_table[profile.user_id].copy()
    items = profile.train_items
    if len(items) == 0:
        raise ValueError("SeqMean user model needs a non-empty profile")
    return params.item_table[np.asarray(items, dtype=np.int64)].mean(axis=0)


def _mlp_forward(params, u, item_rows):
    w1, b1, w2, b2 = params.mlp()
    d = params.dim
    pre = item_rows @ w1[:, d:].T + (w1[:, :d] @ u) + b1
    hidden = np.maximum(pre, 0.0)
    return hidden @ w2 + b2[0], pre, hidden


def score_items(params, u, item_ids):
    """Scores of ``item_ids`` for one user embedding."""
    rows = params.item_table[np.asarray(item_ids, dtype=np.int64)]
    if params.predictor_kind is PredictorKind.DOT:
        return rows @ u
    return _mlp_forward(params, u, rows)[0]


def score(params, u, item_id):
    return float(score_items(params, np.asarray(u, dtype=np.float64), [item_id])[0])


def score_all(params, user_matrix, chunk=64):
    """Score matrix ``[n_users, num_items]`` for a batch of user embeddings."""
    U = np.asarray(user_matrix, dtype=np.float64)
    items = params.item_table
    if params.predictor_kind is PredictorKind.DOT:
        return U @ items.T
    w1, b1, w2, b2 = params.mlp()
    d = params.dim
    user_part = U @ w1[:, :d].T + b1
    item_part = items @ w1[:, d:].T
    out = np.empty((U.shape[0], items.shape[0]))
    for start in range(0, U.shape[0], chunk):
        pre = user_part[start:start + chunk, None, :] + item_part[None, :, :]
        out[start:start + chunk] = np.maximum(pre, 0.0) @ w2 + b2[0]
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


def bpr_loss(pos_score, neg_score):
    """``-log sigmoid(pos - neg)``, computed as ``softplus(neg - pos)``."""
    p = np.asarray(pos_score, dtype=np.float64)
    n = np.asarray(neg_score, dtype=np.float64)
    if np.isnan(p).any() or np.isnan(n).any():
        raise ValueError("bpr_loss received NaN")
    out = _softplus(n - p)
    return float(out) if out.ndim == 0 else out


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class SparseGradient:
    """One client's update: touched user/item rows plus the dense predictor part.

    Row ids are unique and sorted; duplicate contributions are summed.
    """

    user_ids: np.ndarray
    user_grad: np.ndarray
    item_ids: np.ndarray
    item_grad: np.ndarray
    predictor_grad: np.ndarray
    sample_count: int = 0
    loss: float = field(default=float("nan"), compare=False)

    @property
    def user_rows(self):
        return {int(i): self.user_grad[k] for k, i in enumerate(self.user_ids)}

    @property
    def item_rows(self):
        return {int(i): self.item_grad[k] for k, i in enumerate(self.item_ids)}

    def to_dense(self, layout, out=None):
        vec = np.zeros(layout.size) if out is None else out
        users, items, pred = layout.split(vec)
        users[self.user_ids] = self.user_grad
        items[self.item_ids] = self.item_grad
        if self.predictor_grad.size:
            pred[:] = self.predictor_grad
        return vec

    def is_finite(self):
        return bool(np.isfinite(self.user_grad).all() and np.isfinite(self.item_grad).all()
                    and np.isfinite(self.predictor_grad).all())


def _compact(ids, rows, dim):
    """Sum rows sharing an id; return sorted unique ids and their summed rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return ids, np.zeros((0, dim))
    uniq, inverse = np.unique(ids, return_inverse=True)
    out = np.zeros((uniq.size, dim))
    kernels.scatter_add_rows(out, inverse.astype(np.int64), np.ascontiguousarray(rows))
    return uniq, out


def bpr_gradients(params, profile, pos_items, neg_items, user_kind=UserModelKind.SEQ_MEAN,
                  u=None):
    """Mean BPR gradient over paired ``(pos_items[j], neg_items[j])`` samples.

    ``profile`` supplies the user id (ID model) or the item rows whose mean
    forms the user embedding (SeqMean); those rows receive equal shares of
    the user-embedding gradient.
    """
    user_kind = UserModelKind(user_kind)
    pos = np.atleast_1d(np.asarray(pos_items, dtype=np.int64))
    neg = np.atleast_1d(np.asarray(neg_items, dtype=np.int64))
    if pos.shape != neg.shape or pos.size == 0:
        raise ValueError("need equally many (>=1) positive and negative items")
    layout = params.layout
    d = layout.dim
    if u is None:
        u = user_embed(params, profile, user_kind)
    k = pos.size
    ip = params.item_table[pos]
    iN = params.item_table[neg]

    pred_grad = np.zeros(layout.predictor_size)
    if layout.predictor is PredictorKind.DOT:
        yp = ip @ u
        yn = iN @ u
        coef = -_sigmoid(yn - yp) / k  # dL/dyp per pair, batch-averaged
        grad_u = coef @ ip - coef @ iN
        grad_ip = coef[:, None] * u
        grad_in = -coef[:, None] * u
    else:
        w1, b1, w2, b2 = params.mlp()
        gw1, gb1, gw2, gb2 = layout.mlp_views(pred_grad)
        yp, pre_p, hid_p = _mlp_forward(params, u, ip)
        yn, pre_n, hid_n = _mlp_forward(params, u, iN)
        coef = -_sigmoid(yn - yp) / k
        # upstream gradient for each of the 2k scores
        dy = np.concatenate([coef, -coef])
        pre = np.vstack([pre_p, pre_n])
        hid = np.vstack([hid_p, hid_n])
        rows = np.vstack([ip, iN])
        dpre = (dy[:, None] * w2[None, :]) * (pre > 0)
        gw2[:] = dy @ hid
        gb2[:] = dy.sum()
        gb1[:] = dpre.sum(axis=0)
        gw1[:, :d] = np.outer(dpre.sum(axis=0), u)
        gw1[:, d:] = dpre.T @ rows
        grad_u = w1[:, :d].T @ dpre.sum(axis=0)
        grad_rows = dpre @ w1[:, d:]
        grad_ip, grad_in = grad_rows[:k], grad_rows[k:]

    item_ids = [pos, neg]
    item_rows = [grad_ip, grad_in]
    if user_kind is UserModelKind.ID:
        user_ids = np.array([profile.user_id], dtype=np.int64)
        user_grad = grad_u[None, :].copy()
    else:
        prof = np.asarray(profile.train_items, dtype=np.int64)
        item_ids.append(prof)
        item_rows.append(np.broadcast_to(grad_u / prof.size, (prof.size, d)))
        user_ids = np.zeros(0, dtype=np.int64)
        user_grad = np.zeros((0, d))
    ids, grads = _compact(np.concatenate(item_ids), np.vstack(item_rows), d)
    loss = float(np.mean(_softplus(yn - yp)))
    return SparseGradient(user_ids, user_grad, ids, grads, pred_grad, int(k), loss)


def pair_loss(params, profile, pos_items, neg_items, user_kind=UserModelKind.SEQ_MEAN):
    """Mean BPR loss of the pairs; the function ``bpr_gradients`` differentiates."""
    u = user_embed(params, profile, user_kind)
    pos = np.atleast_1d(np.asarray(pos_items, dtype=np.int64))
    neg = np.atleast_1d(np.asarray(neg_items, dtype=np.int64))
    return float(np.mean(_softplus(score_items(params, u, neg) - score_items(params, u, pos))))


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(np.zeros(size), np.zeros(size), 0, lr, beta1, beta2, eps)


def adam_apply(state, params, update):
    """One bias-corrected Adam step; returns ``(new_params, new_state)``.

    Inputs are not modified: the server publishes the new parameters in
    one swap so concurrent readers never see a half-applied step.
    """
    g = np.asarray(update, dtype=np.float64)
    if g.shape != params.vector.shape or g.shape != state.first_moment.shape:
        raise ValueError(f"update shape {g.shape} does not match parameters {params.vector.shape}")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_vec = params.vector - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return ModelParams(params.layout, new_vec), new_state
