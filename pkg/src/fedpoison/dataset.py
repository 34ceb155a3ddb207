"""Interaction-log ingestion, leave-one-out splits and client registry."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedpoison.errors import ConfigError, EmptyDatasetError, ParseError

MIN_INTERACTIONS = 3


class Role(str, enum.Enum):
    BENIGN = "benign"
    BYZANTINE = "byzantine"


@dataclass(frozen=True)
class InteractionLog:
    """Remapped implicit-feedback log.

    ``records`` holds ``(user, item, timestamp)`` triples with contiguous
    0-based ids, grouped by user and sorted by time within each user.
    ``user_map``/``item_map`` map original ids to remapped ids.
    """

    records: tuple
    user_count: int
    item_count: int
    user_map: dict = field(default_factory=dict, repr=False)
    item_map: dict = field(default_factory=dict, repr=False)

    def sequences(self):
        """Per-user item sequences in time order, indexed by remapped user id."""
        seqs = [[] for _ in range(self.user_count)]
        for user, item, _ in self.records:
            seqs[user].append(item)
        return seqs

    @property
    def num_actions(self):
        return len(self.records)


def _parse_rows(path, fmt):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if fmt == "movielens":
                parts = line.split("::")
                if len(parts) != 4:
                    raise ParseError("expected user::item::rating::timestamp", lineno, path)
                fields = (parts[0], parts[1], parts[3])
            else:
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ParseError("expected user<TAB>item<TAB>timestamp", lineno, path)
                fields = parts
            try:
                user, item, ts = (int(x) for x in fields)
            except ValueError:
                raise ParseError(f"non-integer field in {line!r}", lineno, path) from None
            rows.append((user, item, ts))
    return rows


def build_log(rows, min_user_interactions=MIN_INTERACTIONS, min_item_interactions=1):
    """Filter, remap and time-sort raw ``(user, item, timestamp)`` rows.

    Item filtering happens once, before the user filter. Timestamp ties
    keep the original row order.
    """
    if min_user_interactions < MIN_INTERACTIONS:
        raise ConfigError(f"min_user_interactions must be >= {MIN_INTERACTIONS}")
    if min_item_interactions > 1:
        counts = {}
        for _, item, _ in rows:
            counts[item] = counts.get(item, 0) + 1
        rows = [r for r in rows if counts[r[1]] >= min_item_interactions]
    per_user = {}
    for user, _, _ in rows:
        per_user[user] = per_user.get(user, 0) + 1
    rows = [r for r in rows if per_user[r[0]] >= min_user_interactions]
    if not rows:
        raise EmptyDatasetError("no user has enough interactions after filtering")

    user_map = {u: i for i, u in enumerate(sorted({r[0] for r in rows}))}
    item_map = {v: i for i, v in enumerate(sorted({r[1] for r in rows}))}
    remapped = [(user_map[u], item_map[v], ts, pos) for pos, (u, v, ts) in enumerate(rows)]
    remapped.sort(key=lambda r: (r[0], r[2], r[3]))
    records = tuple((u, v, ts) for u, v, ts, _ in remapped)
    return InteractionLog(records, len(user_map), len(item_map), user_map, item_map)


def load_interactions(path, format="movielens", min_user_interactions=MIN_INTERACTIONS,
                      min_item_interactions=1):
    """Read a MovieLens ``.dat`` or a three-column TSV log.

    Every row counts as positive implicit feedback regardless of rating.
    """
    fmt = format.lower()
    if fmt in ("dat", "movielensdat"):
        fmt = "movielens"
    if fmt not in ("movielens", "tsv"):
        raise ConfigError(f"unknown interaction format {format!r}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    rows = _parse_rows(path, fmt)
    return build_log(rows, min_user_interactions, min_item_interactions)


def write_id_mapping(log, out_dir):
    """Persist ``user_ids.tsv`` and ``item_ids.tsv`` (``original<TAB>remapped``)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, mapping in (("user_ids.tsv", log.user_map), ("item_ids.tsv", log.item_map)):
        p = out_dir / name
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            for orig, new in sorted(mapping.items(), key=lambda kv: kv[1]):
                fh.write(f"{orig}\t{new}\n")
        paths.append(p)
    return paths


def read_id_mapping(path):
    mapping = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ParseError("expected original<TAB>remapped", lineno, path)
            mapping[int(parts[0])] = int(parts[1])
    return mapping


def synthetic_interactions(num_users=1000, num_items=500, num_clusters=10, min_len=8,
                           max_len=40, noise=0.1, zipf=1.0, seed=0):
    """Generate a log with planted cluster structure.

    Items are split into ``num_clusters`` contiguous groups; each user
    belongs to one cluster and draws distinct items from it with Zipf-like
    popularity, except for a ``noise`` fraction drawn uniformly from the
    rest of the catalogue. Profiles are capped at the cluster size plus
    the noise draws; interaction order is a random permutation.
    """
    if num_items < num_clusters:
        raise ConfigError("need at least one item per cluster")
    rng = np.random.default_rng(seed)
    groups = np.array_split(np.arange(num_items), num_clusters)
    popularity = []
    for group in groups:
        w = 1.0 / np.arange(1, len(group) + 1) ** zipf
        popularity.append(w[rng.permutation(len(group))] / w.sum())
    rows = []
    ts = 0
    for user in range(num_users):
        cluster = int(rng.integers(num_clusters))
        group, weights = groups[cluster], popularity[cluster]
        length = min(int(rng.integers(min_len, max_len + 1)), num_items)
        n_noise = int(rng.binomial(length, noise))
        n_cluster = min(length - n_noise, len(group))
        picked = group[rng.choice(len(group), size=n_cluster, replace=False, p=weights)]
        rest = np.setdiff1d(np.arange(num_items), picked)
        items = np.concatenate([picked, rng.choice(rest, size=n_noise, replace=False)])
        for item in rng.permutation(items):
            rows.append((user, int(item), ts))
            ts += 1
    return build_log(rows)


def leave_one_out_split(log):
    """Return ``(train_items, val_item, test_item)`` per user.

    The last interaction is the test item, the one before it the
    validation item, and the remainder (in time order) the training
    profile.
    """
    splits = []
    for user, seq in enumerate(log.sequences()):
        if len(seq) < MIN_INTERACTIONS:
            raise ValueError(
                f"user {user} has {len(seq)} interactions; leave-one-out needs {MIN_INTERACTIONS}"
            )
        splits.append((tuple(seq[:-2]), seq[-2], seq[-1]))
    return splits


@dataclass(frozen=True)
class ClientProfile:
    user_id: int
    train_items: tuple
    val_item: int
    test_item: int
    role: Role = Role.BENIGN
    k_positives: int = 1

    @property
    def is_byzantine(self):
        return self.role is Role.BYZANTINE

    @property
    def seen_items(self):
        """Every item the client holds locally (profile, validation, test)."""
        return frozenset(self.train_items) | {self.val_item, self.test_item}


@dataclass(frozen=True)
class ClientRegistry:
    clients: tuple
    byzantine_ratio: float
    seed: int
    num_items: int

    def __len__(self):
        return len(self.clients)

    @property
    def num_users(self):
        return len(self.clients)

    def byzantine_ids(self):
        return [c.user_id for c in self.clients if c.is_byzantine]

    def benign(self):
        return [c for c in self.clients if not c.is_byzantine]


def byzantine_count(ratio, n):
    return int(math.floor(ratio * n + 0.5))


def build_client_registry(splits, byzantine_ratio, k_positives, seed, num_items=None):
    """Create one client per split and flag a seeded sample as Byzantine."""
    if not 0 <= byzantine_ratio < 1:
        raise ConfigError(f"byzantine_ratio must be in [0, 1), got {byzantine_ratio}")
    if k_positives < 1:
        raise ConfigError("k_positives must be >= 1")
    n = len(splits)
    m = byzantine_count(byzantine_ratio, n)
    rng = np.random.default_rng(seed)
    flagged = set(rng.choice(n, size=m, replace=False).tolist()) if m else set()
    if num_items is None:
        num_items = 1 + max(max(max(t, default=-1), v, s) for t, v, s in splits)
    clients = []
    for uid, (train, val, test) in enumerate(splits):
        if not train:
            raise ValueError(f"user {uid} has an empty training profile")
        clients.append(ClientProfile(
            user_id=uid,
            train_items=tuple(train),
            val_item=val,
            test_item=test,
            role=Role.BYZANTINE if uid in flagged else Role.BENIGN,
            k_positives=min(k_positives, len(train)),
        ))
    return ClientRegistry(tuple(clients), byzantine_ratio, seed, num_items)
