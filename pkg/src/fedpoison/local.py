"""Benign client-side sampling and local gradient computation."""
from __future__ import annotations

import numpy as np

from fedpoison.errors import SamplingError
from fedpoison.model import UserModelKind, bpr_gradients


def sample_benign_pairs(client, num_items, rng):
    """Draw ``K`` positives from the profile and ``K`` random non-interacted negatives.

    Positives are distinct items sampled without replacement; negatives
    are independent uniform draws from the items outside the profile.
    """
    profile = np.unique(np.asarray(client.train_items, dtype=np.int64))
    k = min(client.k_positives, profile.size)
    pos = rng.choice(profile, size=k, replace=False)
    n_allowed = num_items - profile.size
    if n_allowed <= 0:
        raise SamplingError(f"client {client.user_id}: no item left to sample as negative")
    # draw a rank among the allowed items, then skip over the excluded ids below it
    draws = rng.integers(n_allowed, size=k)
    neg = draws + np.searchsorted(profile - np.arange(profile.size), draws, side="right")
    return pos.astype(np.int64), neg.astype(np.int64)


def local_update_benign(client, params, rng, user_kind=UserModelKind.SEQ_MEAN):
    pos, neg = sample_benign_pairs(client, params.layout.num_items, rng)
    return bpr_gradients(params, client, pos, neg, user_kind)
