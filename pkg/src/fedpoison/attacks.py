"""Byzantine client behaviours.

FedAttack changes only the training samples (hardest negatives and
hardest pseudo-positives retrieved with the client's own user
embedding) and then runs the ordinary backward pass. The baselines
either flip labels or manipulate the update itself using statistics the
Byzantine clients estimate from their own benign-style gradients.
"""
from __future__ import annotations

import enum
import logging
import math
import statistics
from dataclasses import dataclass

import numpy as np

from fedpoison import kernels
from fedpoison.defenses import _krum_index
from fedpoison.errors import AttackSetupError, ConfigError
from fedpoison.local import local_update_benign, sample_benign_pairs
from fedpoison.model import SparseGradient, UserModelKind, bpr_gradients, user_embed

log = logging.getLogger(__name__)


class AttackKind(str, enum.Enum):
    NONE = "none"
    FEDATTACK = "fedattack"
    LABEL_FLIP = "labelflip"
    GAUSSIAN = "gaussian"
    LIE = "lie"
    STAT_OPT = "statopt"
    DYN_OPT = "dynopt"


# attacks that forge the update from estimated benign statistics
STAT_ATTACKS = frozenset({AttackKind.GAUSSIAN, AttackKind.LIE, AttackKind.STAT_OPT,
                          AttackKind.DYN_OPT})


@dataclass(frozen=True)
class AttackStrategy:
    kind: AttackKind = AttackKind.NONE
    pool_fraction: float = 1.0
    lam: float = 1.0
    gamma_init: float = 1.0
    gamma_step: float = 0.01
    z_override: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if not 0 < self.pool_fraction <= 1:
            raise ConfigError("attack.pool_fraction must be in (0, 1]")
        if self.lam <= 0:
            raise ConfigError("attack.lambda must be positive")
        if self.gamma_step <= 0 or self.gamma_init < self.gamma_step:
            raise ConfigError("need 0 < attack.gamma_step <= attack.gamma_init")


@dataclass(frozen=True)
class CandidatePool:
    """Items known to the attacker (sorted ids), fixed for a whole run."""

    item_ids: np.ndarray

    def __len__(self):
        return int(self.item_ids.size)


def make_candidate_pool(num_items, fraction=1.0, seed=0):
    if not 0 < fraction <= 1:
        raise ConfigError("pool fraction must be in (0, 1]")
    if fraction == 1.0:
        return CandidatePool(np.arange(num_items, dtype=np.int64))
    size = max(1, int(math.floor(fraction * num_items + 0.5)))
    rng = np.random.default_rng([seed, 0x900])
    ids = np.sort(rng.choice(num_items, size=size, replace=False)).astype(np.int64)
    return CandidatePool(ids)


class ExactRetriever:
    """Brute-force maximum/minimum inner-product search over a candidate pool.

    Stands where an ANN index would sit at larger scale; anything with the
    same ``search`` signature can replace it.
    """

    def search(self, item_table, u, k, pool, exclude, largest):
        ids = pool.item_ids
        if exclude:
            ex = np.fromiter(exclude, dtype=np.int64, count=len(exclude))
            ids = ids[~np.isin(ids, ex)]
        if ids.size < k:
            raise AttackSetupError(
                f"candidate pool has {ids.size} admissible items, need {k}")
        scores = item_table[ids] @ u
        return kernels.select_extreme(scores, ids, k, largest)


DEFAULT_RETRIEVER = ExactRetriever()


def hardest_negatives(item_table, u, k, pool, exclude=(), retriever=DEFAULT_RETRIEVER):
    """The ``k`` admissible pool items with the largest inner product with ``u``."""
    return retriever.search(item_table, np.asarray(u, dtype=np.float64), k, pool,
                            frozenset(exclude), largest=True)


def hardest_pseudo_positives(item_table, u, k, pool, exclude=(), retriever=DEFAULT_RETRIEVER):
    """The ``k`` admissible pool items with the smallest inner product with ``u``."""
    return retriever.search(item_table, np.asarray(u, dtype=np.float64), k, pool,
                            frozenset(exclude), largest=False)


def fedattack_pairs(client, params, pool, user_kind, rng, retriever=DEFAULT_RETRIEVER):
    """Poisoned ``(positives, negatives, u)`` for one Byzantine client."""
    u = user_embed(params, client, user_kind)
    k = client.k_positives
    exclude = client.seen_items
    admissible = len(pool) - int(np.isin(pool.item_ids, list(exclude)).sum())
    if 2 * k > admissible:
        raise AttackSetupError(
            f"client {client.user_id}: need 2K={2 * k} admissible pool items, have {admissible}")
    neg = hardest_negatives(params.item_table, u, k, pool, exclude, retriever)
    # excluding the negatives keeps the two sets disjoint even under score ties
    pos = hardest_pseudo_positives(params.item_table, u, k, pool,
                                   exclude | frozenset(neg.tolist()), retriever)
    pos = pos[rng.permutation(k)]
    return pos, neg, u


def fedattack_update(client, params, pool, user_kind=UserModelKind.SEQ_MEAN, rng=None,
                     retriever=DEFAULT_RETRIEVER):
    rng = np.random.default_rng() if rng is None else rng
    pos, neg, u = fedattack_pairs(client, params, pool, user_kind, rng, retriever)
    return bpr_gradients(params, client, pos, neg, user_kind, u=u)


def label_flip_update(client, params, rng, user_kind=UserModelKind.SEQ_MEAN):
    """Benign sampling with the positive and negative roles swapped."""
    pos, neg = sample_benign_pairs(client, params.layout.num_items, rng)
    return bpr_gradients(params, client, neg, pos, user_kind)


@dataclass(frozen=True)
class BenignStatEstimate:
    mean: np.ndarray
    std: np.ndarray
    n_visible: int


def benign_stats_from_updates(dense_updates):
    """Coordinate-wise mean and population std of a stack of dense updates."""
    X = np.asarray(dense_updates, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need at least one update to estimate statistics")
    n = X.shape[0]
    mean = X.mean(axis=0)
    if n < 2:
        log.debug("only one Byzantine update visible; std set to 0")
        std = np.zeros_like(mean)
    else:
        std = X.std(axis=0)
    return BenignStatEstimate(mean, std, n)


def estimate_benign_stats(byz_clients, params, rngs, user_kind=UserModelKind.SEQ_MEAN):
    """Each Byzantine client computes a benign-style update on its own profile.

    Returns the statistics together with those reference updates (sparse),
    which Gaussian and DynOpt reuse.
    """
    if not byz_clients:
        raise ValueError("no Byzantine client in this round")
    refs = [local_update_benign(c, params, r, user_kind) for c, r in zip(byz_clients, rngs)]
    dense = np.stack([g.to_dense(params.layout) for g in refs])
    return benign_stats_from_updates(dense), refs


def gaussian_update(reference, stats, layout, rng):
    """Replace every touched coordinate of ``reference`` with a Gaussian draw.

    The sparsity pattern is that of the client's own benign-style update;
    coordinate ``c`` is drawn from ``Normal(stats.mean[c], stats.std[c]**2)``.
    """
    if stats is None:
        raise ValueError("Gaussian attack needs benign statistics")
    mean_u, mean_i, mean_p = layout.split(stats.mean)
    std_u, std_i, std_p = layout.split(stats.std)
    uid, iid = reference.user_ids, reference.item_ids
    user_grad = rng.normal(mean_u[uid], std_u[uid]) if uid.size else reference.user_grad.copy()
    item_grad = rng.normal(mean_i[iid], std_i[iid])
    pred = rng.normal(mean_p, std_p) if mean_p.size else np.zeros(0)
    return SparseGradient(uid.copy(), np.asarray(user_grad), iid.copy(), np.asarray(item_grad),
                          np.asarray(pred), reference.sample_count)


def lie_z(n, m, z_override=None):
    """Noise multiplier of the little-is-enough attack (clamped at 0)."""
    if z_override is not None:
        return float(z_override)
    if m < 1 or n <= m:
        raise ConfigError(f"LIE needs 1 <= m < n (n={n}, m={m})")
    s = math.floor(n / 2 + 1) - m
    num = n - m - s
    if num <= 0 or s <= 0:
        raise ConfigError(f"LIE z undefined for n={n}, m={m}; set attack.z_override")
    z = statistics.NormalDist().inv_cdf(num / (n - m))
    return max(0.0, z)


def lie_update(stats, n, m, z_override=None):
    z = lie_z(n, m, z_override)
    return stats.mean + z * stats.std


def stat_opt_update(stats, lam):
    if lam <= 0:
        raise ConfigError("StatOpt lambda must be positive")
    return stats.mean - lam * np.sign(stats.mean)


def halving_search(survives, gamma_init, gamma_step):
    """Largest value in ``gamma_init, gamma_init/2, ...`` (not below ``gamma_step``) that survives."""
    gamma = gamma_init
    while gamma >= gamma_step:
        if survives(gamma):
            return gamma
        gamma /= 2.0
    return gamma_step


def krum_probe(references, candidate, m):
    """True if Krum over ``references`` plus ``m`` candidate copies picks a copy.

    References come first, so score ties favour an honest update. With
    fewer than three probe vectors Krum is undefined and the probe fails.
    """
    refs = np.asarray(references, dtype=np.float64)
    X = np.vstack([refs, np.repeat(candidate[None, :], m, axis=0)])
    n = X.shape[0]
    if n < 3:
        return False
    f = min(m, n - 3)
    return _krum_index(X, f) >= refs.shape[0]


def dyn_opt_update(stats, references, m, gamma_init=1.0, gamma_step=0.01, lam_fallback=None):
    """Benign mean pushed along the unit direction opposing it, scaled by a probed gamma."""
    norm = float(np.linalg.norm(stats.mean))
    if norm == 0.0:
        return stat_opt_update(stats, lam_fallback if lam_fallback is not None else gamma_init)
    direction = -stats.mean / norm
    gamma = halving_search(
        lambda g: krum_probe(references, stats.mean + g * direction, m), gamma_init, gamma_step)
    return stats.mean + gamma * direction
