"""Federated round protocol and training loop.

One epoch is a seeded permutation of all clients cut into rounds of
``clients_per_round``. In each round every participant computes an
update against the same parameter snapshot, the server optionally drops
updates a detector flags, aggregates the rest and takes one Adam step.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from fedpoison import attacks as atk
from fedpoison.attacks import AttackKind, AttackStrategy
from fedpoison.defenses import AggregationRule, aggregate
from fedpoison.detection import detect_and_filter, featurizer
from fedpoison.errors import ConfigError, FedPoisonError
from fedpoison.evaluation import SampleRecord, evaluate_epoch
from fedpoison.local import local_update_benign, sample_benign_pairs
from fedpoison.model import (AdamState, PredictorKind, SparseGradient, UserModelKind, adam_apply,
                             init_params)

log = logging.getLogger(__name__)

__all__ = [
    "SimulationConfig", "RoundRecord", "EpochMetrics", "MetricsTimeline", "Simulation",
    "sample_round", "epoch_rounds", "local_update_benign", "aggregate_round", "run_training",
]


@dataclass(frozen=True)
class SimulationConfig:
    max_epochs: int = 50
    clients_per_round: int = 16
    byzantine_ratio: float = 0.0
    attack: AttackStrategy = field(default_factory=AttackStrategy)
    defense: AggregationRule = field(default_factory=AggregationRule)
    detector_enabled: bool = False
    detector_features: str = "stats"
    seed: int = 0
    d: int = 64
    lr: float = 1e-3
    k_eval: int = 5
    k_positives: int = 50
    rounds_per_epoch: int | None = None
    user_model: UserModelKind = UserModelKind.SEQ_MEAN
    predictor: PredictorKind = PredictorKind.DOT
    exclude_seen: bool = True
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "user_model", UserModelKind(self.user_model))
        object.__setattr__(self, "predictor", PredictorKind(self.predictor))
        if self.clients_per_round < 1:
            raise ConfigError("clients_per_round must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0 <= self.byzantine_ratio < 1:
            raise ConfigError("byzantine_ratio must be in [0, 1)")
        if self.d < 1 or self.lr <= 0 or self.k_eval < 1 or self.k_positives < 1:
            raise ConfigError("d, lr, k_eval and k_positives must be positive")
        if self.rounds_per_epoch is not None and self.rounds_per_epoch < 1:
            raise ConfigError("rounds_per_epoch must be >= 1 when set")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        featurizer(self.detector_features)

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class RoundRecord:
    epoch: int
    round_index: int
    participants: tuple
    update_norm: float
    flagged: tuple = ()
    gradients: dict | None = None


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    hr: float
    ndcg: float
    val_hr: float
    val_ndcg: float


@dataclass
class MetricsTimeline:
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    rounds: int = 0

    def append(self, m):
        self.epochs.append(m)
        best = self.best
        if best is None or m.val_hr > best.val_hr:
            self.best_epoch = m.epoch

    @property
    def best(self):
        if self.best_epoch is None:
            return None
        return next(m for m in self.epochs if m.epoch == self.best_epoch)

    @property
    def final(self):
        return self.epochs[-1] if self.epochs else None


def epoch_rounds(num_clients, clients_per_round, rng):
    """Split one seeded permutation of client indices into consecutive rounds."""
    perm = rng.permutation(num_clients)
    return [perm[i:i + clients_per_round] for i in range(0, num_clients, clients_per_round)]


def sample_round(registry, clients_per_round, rng):
    """Client ids of the first round of a fresh epoch permutation."""
    if len(registry) == 0:
        raise ValueError("empty client registry")
    ids = [c.user_id for c in registry.clients]
    first = epoch_rounds(len(ids), clients_per_round, rng)[0]
    return sorted(ids[i] for i in first)


def aggregate_round(gradients, rule, layout=None, byzantine_ratio=0.0):
    """Densify client updates (sparse or already dense) and apply ``rule``."""
    if not gradients:
        raise ValueError("aggregate_round needs at least one update")
    rows = []
    for g in gradients:
        if isinstance(g, SparseGradient):
            if layout is None:
                raise ValueError("layout required to densify sparse gradients")
            rows.append(g.to_dense(layout))
        else:
            rows.append(np.asarray(g, dtype=np.float64))
    return aggregate(np.stack(rows), rule, byzantine_ratio)


def client_rng(seed, epoch, round_index, client_id):
    return np.random.default_rng([seed, epoch, round_index, client_id, 0xC1])


def _densify(updates, participants, layout):
    D = np.zeros((len(participants), layout.size))
    for row, cid in enumerate(participants):
        u = updates[cid]
        if isinstance(u, SparseGradient):
            u.to_dense(layout, out=D[row])
        else:
            D[row] = u
    return D


class Simulation:
    """Stateful driver for one configuration; ``run()`` returns the timeline.

    ``feature_sink(epoch, round_index, client_id, role, features)`` and
    ``gradient_sink(record)`` receive per-update data for detector training
    and gradient logs. The role passed to the sinks comes from the
    simulator's ground truth and is never consulted by the server path.
    """

    def __init__(self, config, registry, detector=None, feature_sink=None,
                 gradient_sink=None, keep_gradients=False):
        self.config = config
        self.registry = registry
        self.detector = detector
        if config.detector_enabled and detector is None:
            raise ConfigError("detector_enabled requires a trained detector")
        self.feature_sink = feature_sink
        self.gradient_sink = gradient_sink
        self.keep_gradients = keep_gradients
        self.params = init_params(registry.num_users, registry.num_items, config.d,
                                  config.predictor, config.seed)
        self.adam = AdamState.zeros(self.params.layout.size, lr=config.lr)
        self.pool = atk.make_candidate_pool(registry.num_items, config.attack.pool_fraction,
                                            config.seed)
        self.timeline = MetricsTimeline()
        self.records = []
        self.best_params = None
        self._by_id = {c.user_id: c for c in registry.clients}

    # -- client side ------------------------------------------------------------------

    @property
    def _attack_active(self):
        return self.config.attack.kind is not AttackKind.NONE

    def _byzantine_update(self, client, params, rng):
        kind = self.config.attack.kind
        uk = self.config.user_model
        if kind is AttackKind.FEDATTACK:
            return atk.fedattack_update(client, params, self.pool, uk, rng)
        if kind is AttackKind.LABEL_FLIP:
            return atk.label_flip_update(client, params, rng, uk)
        raise AssertionError(kind)

    def _client_updates(self, params, participants, epoch, r):
        """Updates of all participants keyed by client id (sparse or dense)."""
        cfg = self.config
        clients = [self._by_id[cid] for cid in participants]
        rngs = {c.user_id: client_rng(cfg.seed, epoch, r, c.user_id) for c in clients}
        byz = [c for c in clients if c.is_byzantine] if self._attack_active else []
        kind = cfg.attack.kind

        forged = {}
        if byz and kind in atk.STAT_ATTACKS:
            stats, refs = atk.estimate_benign_stats(byz, params, [rngs[c.user_id] for c in byz],
                                                    cfg.user_model)
            n, m = len(clients), len(byz)
            if kind is AttackKind.GAUSSIAN:
                for c, ref in zip(byz, refs):
                    forged[c.user_id] = atk.gaussian_update(ref, stats, params.layout,
                                                            rngs[c.user_id])
            else:
                if kind is AttackKind.LIE:
                    shared = atk.lie_update(stats, n, m, cfg.attack.z_override)
                elif kind is AttackKind.STAT_OPT:
                    shared = atk.stat_opt_update(stats, cfg.attack.lam)
                else:
                    dense_refs = np.stack([g.to_dense(params.layout) for g in refs])
                    shared = atk.dyn_opt_update(stats, dense_refs, m, cfg.attack.gamma_init,
                                                cfg.attack.gamma_step)
                for c in byz:
                    forged[c.user_id] = shared

        byz_ids = {c.user_id for c in byz}

        def work(c):
            if c.user_id in forged:
                return forged[c.user_id]
            if c.user_id in byz_ids:
                return self._byzantine_update(c, params, rngs[c.user_id])
            return local_update_benign(c, params, rngs[c.user_id], cfg.user_model)

        if cfg.threads > 1 and len(clients) > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                results = list(pool.map(work, clients))
        else:
            results = [work(c) for c in clients]
        return dict(zip(participants, results))

    # -- server side ------------------------------------------------------------------

    def run_round(self, epoch, r, participants):
        cfg = self.config
        params = self.params
        layout = params.layout
        participants = tuple(sorted(int(p) for p in participants))
        updates = self._client_updates(params, participants, epoch, r)
        D = _densify(updates, participants, layout)
        if not np.isfinite(D).all():
            bad = [cid for row, cid in enumerate(participants) if not np.isfinite(D[row]).all()]
            raise FedPoisonError(f"epoch {epoch} round {r}: non-finite update from clients {bad}")
        round_avg = D.mean(axis=0)

        features = featurizer(cfg.detector_features)
        if self.feature_sink is not None:
            for row, cid in enumerate(participants):
                self.feature_sink(epoch, r, cid, self._by_id[cid].role,
                                  features(D[row], round_avg, layout))

        flagged = ()
        if cfg.detector_enabled:
            kept, flagged_ids = detect_and_filter(list(zip(participants, D)), round_avg,
                                                  self.detector, layout, features=features)
            flagged = tuple(flagged_ids)
            if flagged and len(kept) < len(participants):
                D = np.stack([v for _, v in kept])

        agg = aggregate(D, cfg.defense, cfg.byzantine_ratio)
        self.params, self.adam = adam_apply(self.adam, params, agg)

        record = RoundRecord(epoch, r, participants, float(np.linalg.norm(agg)), flagged,
                             updates if self.keep_gradients else None)
        if self.gradient_sink is not None:
            self.gradient_sink(record, updates, {c: self._by_id[c].role for c in participants})
        self.records.append(record)
        return record

    def run_epoch(self, epoch):
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, epoch, 0xE0])
        ids = [c.user_id for c in self.registry.clients]
        chunks = epoch_rounds(len(ids), cfg.clients_per_round, rng)
        if cfg.rounds_per_epoch is not None:
            chunks = chunks[:cfg.rounds_per_epoch]
        for r, chunk in enumerate(chunks):
            try:
                self.run_round(epoch, r, [ids[i] for i in chunk])
            except FedPoisonError:
                raise
            except Exception as exc:
                raise FedPoisonError(f"epoch {epoch} round {r}: {exc}") from exc
            self.timeline.rounds += 1

    def evaluate(self, epoch):
        cfg = self.config
        hr, ndcg = evaluate_epoch(self.params, self.registry, cfg.user_model, cfg.k_eval,
                                  "test", cfg.exclude_seen)
        vhr, vndcg = evaluate_epoch(self.params, self.registry, cfg.user_model, cfg.k_eval,
                                    "val", cfg.exclude_seen)
        m = EpochMetrics(epoch, hr, ndcg, vhr, vndcg)
        prev_best = self.timeline.best_epoch
        self.timeline.append(m)
        if self.timeline.best_epoch != prev_best:
            self.best_params = self.params
        return m

    def run(self):
        for epoch in range(self.config.max_epochs):
            self.run_epoch(epoch)
            m = self.evaluate(epoch)
            log.debug("epoch %d hr=%.4f ndcg=%.4f val_hr=%.4f", epoch, m.hr, m.ndcg, m.val_hr)
        return self.timeline

    # -- analysis helpers -------------------------------------------------------------

    def client_updates(self, participants=None, epoch=0, round_index=0):
        """Every participant's update against the current snapshot, as a dense matrix.

        Defaults to all clients; rows follow sorted client id.
        """
        if participants is None:
            participants = [c.user_id for c in self.registry.clients]
        participants = tuple(sorted(int(p) for p in participants))
        updates = self._client_updates(self.params, participants, epoch, round_index)
        return participants, _densify(updates, participants, self.params.layout)

    def sample_records(self, epoch=0, round_index=0):
        """Training pairs every client would use against the current snapshot."""
        cfg = self.config
        out = []
        for c in self.registry.clients:
            rng = client_rng(cfg.seed, epoch, round_index, c.user_id)
            if c.is_byzantine and cfg.attack.kind is AttackKind.FEDATTACK:
                pos, neg, _ = atk.fedattack_pairs(c, self.params, self.pool, cfg.user_model, rng)
            else:
                pos, neg = sample_benign_pairs(c, self.registry.num_items, rng)
            out.append(SampleRecord(c.user_id, c.role, tuple(pos.tolist()), tuple(neg.tolist())))
        return out


def run_training(config, registry, log=None, **kwargs):
    """Run a full simulation and return its metrics timeline.

    ``log`` (the interaction log) is accepted for symmetry with the data
    pipeline; client data comes from ``registry``.
    """
    if log is not None and (log.user_count != registry.num_users
                            or log.item_count != registry.num_items):
        raise ConfigError("registry does not match the interaction log")
    return Simulation(config, registry, **kwargs).run()


def random_hit_ratio(k, num_items):
    """Expected HR@k of a uniformly random ranking."""
    return min(1.0, k / num_items)


def expected_rounds(num_clients, clients_per_round):
    return math.ceil(num_clients / clients_per_round)
