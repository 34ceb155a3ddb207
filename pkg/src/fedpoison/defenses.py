"""Server-side aggregation rules over densified client updates.

Every rule takes an ``(n, P)`` array whose rows are already ordered by
client id; that fixed order is what makes tie-breaks reproducible.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from fedpoison import kernels
from fedpoison.errors import ConfigError


class DefenseKind(str, enum.Enum):
    MEAN = "mean"
    MEDIAN = "median"
    TRIMMED_MEAN = "trimmed_mean"
    KRUM = "krum"
    MULTI_KRUM = "multi_krum"
    NORM_BOUND = "norm_bound"


@dataclass(frozen=True)
class AggregationRule:
    """Aggregation rule plus its parameters.

    ``beta``, ``f`` and ``m_select`` may be left as ``None``; they are then
    derived per round from the round size and the Byzantine ratio.
    """

    kind: DefenseKind = DefenseKind.MEAN
    beta: int | None = None
    f: int | None = None
    m_select: int | None = None
    tau: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "kind", DefenseKind(self.kind))
        if self.tau <= 0:
            raise ConfigError("defense.tau must be positive")


def _stack(updates):
    X = np.asarray(updates, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise ValueError("aggregation needs at least one update")
    return X


def agg_mean(updates):
    return _stack(updates).mean(axis=0)


def agg_median(updates):
    """Coordinate-wise median; even counts average the two middle values."""
    return np.median(_stack(updates), axis=0)


def agg_trimmed_mean(updates, beta):
    X = _stack(updates)
    n = X.shape[0]
    if beta < 0 or n <= 2 * beta:
        raise ConfigError(f"trimmed mean needs n > 2*beta (n={n}, beta={beta})")
    S = np.sort(X, axis=0)
    # sequential sum in sorted order, so results do not depend on numpy's pairwise blocking
    acc = S[beta].copy()
    for row in S[beta + 1:n - beta]:
        acc += row
    return acc / (n - 2 * beta)


def _krum_index(X, f, relaxed=False):
    n = X.shape[0]
    nb = n - f - 2
    if nb < 1:
        if not relaxed or n < 2:
            raise ConfigError(f"Krum needs n - f - 2 >= 1 (n={n}, f={f})")
        nb = 1
    scores = kernels.krum_scores(X, nb)
    return int(np.argmin(scores))  # argmin returns the first minimum: lowest index


def agg_krum(updates, f):
    X = _stack(updates)
    return X[_krum_index(X, f)].copy()


def multi_krum_select(updates, f, m_select, strict=True):
    """Indices chosen by repeated Krum on the shrinking set, in selection order.

    With ``strict=False`` iterations whose remaining set is too small for
    ``n - f - 2`` neighbours score against the single nearest neighbour
    instead of failing.
    """
    X = _stack(updates)
    n = X.shape[0]
    if not 1 <= m_select <= n:
        raise ConfigError(f"m_select must be in [1, {n}], got {m_select}")
    remaining = list(range(n))
    chosen = []
    for it in range(m_select):
        if len(remaining) == 1:
            chosen.append(remaining.pop())
            continue
        if len(remaining) - f - 2 < 1:
            if m_select - it == len(remaining):
                chosen.extend(remaining)
                break
            if strict:
                raise ConfigError(
                    f"Multi-Krum iteration {it}: n - f - 2 < 1 with n={len(remaining)}, f={f}")
        k = _krum_index(X[remaining], f, relaxed=not strict)
        chosen.append(remaining.pop(k))
    return chosen


def agg_multi_krum(updates, f, m_select, strict=True):
    X = _stack(updates)
    return X[sorted(multi_krum_select(X, f, m_select, strict))].mean(axis=0)


def clip_norm(update, tau):
    norm = float(np.linalg.norm(update))
    if norm <= tau or norm == 0.0:
        return np.array(update, dtype=np.float64)
    return update * (tau / norm)


def agg_norm_bound(updates, tau=2.0):
    if tau <= 0:
        raise ConfigError("tau must be positive")
    X = _stack(updates)
    norms = np.linalg.norm(X, axis=1)
    scale = np.minimum(1.0, tau / np.where(norms > 0, norms, 1.0))
    return (X * scale[:, None]).mean(axis=0)


def resolve_params(rule, n, byzantine_ratio):
    """Concrete ``(beta, f, m_select)`` for a round of ``n`` updates.

    Defaults: ``f = max(1, round(ratio * n))``, ``beta = f``,
    ``m_select = n - f``; each is capped so the rule stays defined for
    small rounds.
    """
    f = rule.f if rule.f is not None else max(1, int(np.floor(byzantine_ratio * n + 0.5)))
    beta = rule.beta if rule.beta is not None else f
    m_select = rule.m_select if rule.m_select is not None else n - f
    if rule.f is None:
        f = max(0, min(f, n - 3))
    if rule.beta is None:
        beta = max(0, min(beta, (n - 1) // 2))
    if rule.m_select is None:
        m_select = max(1, min(m_select, n))
    return beta, f, m_select


def aggregate(updates, rule, byzantine_ratio=0.0):
    """Apply ``rule`` to a stack of dense updates."""
    X = _stack(updates)
    n = X.shape[0]
    kind = rule.kind
    if kind is DefenseKind.MEAN:
        return agg_mean(X)
    if kind is DefenseKind.MEDIAN:
        return agg_median(X)
    if kind is DefenseKind.NORM_BOUND:
        return agg_norm_bound(X, rule.tau)
    beta, f, m_select = resolve_params(rule, n, byzantine_ratio)
    if kind is DefenseKind.TRIMMED_MEAN:
        return agg_trimmed_mean(X, beta)
    if n < 3:
        # Krum has no neighbours to score against; fall back to the mean of so few updates
        return agg_mean(X)
    if kind is DefenseKind.KRUM:
        return agg_krum(X, f)
    return agg_multi_krum(X, f, m_select, strict=False)
