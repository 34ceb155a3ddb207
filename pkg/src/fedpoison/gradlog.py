"""Per-(round, client) gradient logs with a separate role-label sidecar.

The log itself holds only what the server saw: detector features and,
optionally, the sparse update. Ground-truth roles go to a TSV next to it
so that nothing on the server path can read them.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from fedpoison.checkpoint import atomic_write_bytes, atomic_write_text, decode_tensors, encode_tensors
from fedpoison.dataset import Role
from fedpoison.detection import DetectorDataset
from fedpoison.model import SparseGradient

LOG_KIND = "gradient_log"


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".roles.tsv")


def _as_sparse(update, layout):
    if isinstance(update, SparseGradient):
        return update
    users, items, pred = layout.split(np.asarray(update, dtype=np.float64))
    uid = np.flatnonzero(np.any(users != 0.0, axis=1))
    iid = np.flatnonzero(np.any(items != 0.0, axis=1))
    return SparseGradient(uid, users[uid].copy(), iid, items[iid].copy(), pred.copy())


class GradientLogWriter:
    """Collects records from a ``Simulation``'s sinks; ``write`` stores them.

    Pass ``writer.feature_sink`` and ``writer.gradient_sink`` to the
    simulation. With ``keep_updates=False`` only features are kept, which
    keeps logs small when attacks forge dense updates.
    """

    def __init__(self, layout, keep_updates=True, epochs=None):
        self.layout = layout
        self.keep_updates = keep_updates
        self.epochs = epochs
        self.index = []
        self.features = []
        self.roles = []
        self.updates = []

    def _wanted(self, epoch):
        return self.epochs is None or epoch < self.epochs

    def feature_sink(self, epoch, round_index, client_id, role, features):
        if not self._wanted(epoch):
            return
        self.index.append((epoch, round_index, client_id))
        self.features.append(np.asarray(features, dtype=np.float64))
        self.roles.append(Role(role))

    def gradient_sink(self, record, updates, roles):
        if not self.keep_updates or not self._wanted(record.epoch):
            return
        for cid in record.participants:
            self.updates.append(_as_sparse(updates[cid], self.layout))

    def __len__(self):
        return len(self.index)

    def dataset(self):
        labels = np.array([r is Role.BYZANTINE for r in self.roles], dtype=np.int64)
        feats = np.stack(self.features) if self.features else np.zeros((0, 0))
        return DetectorDataset(feats, labels)

    def write(self, path):
        path = Path(path)
        n = len(self.index)
        arrays = {
            "index": np.array(self.index, dtype=np.float64).reshape(n, 3),
            "features": self.dataset().features,
        }
        meta = {"records": n, "has_updates": bool(self.updates),
                "predictor_size": self.layout.predictor_size, "dim": self.layout.dim}
        if self.updates:
            ups = self.updates
            arrays.update(
                user_offsets=np.cumsum([0] + [g.user_ids.size for g in ups]).astype(np.float64),
                user_ids=np.concatenate([g.user_ids for g in ups]).astype(np.float64),
                user_grad=np.concatenate([g.user_grad.reshape(-1, self.layout.dim) for g in ups]),
                item_offsets=np.cumsum([0] + [g.item_ids.size for g in ups]).astype(np.float64),
                item_ids=np.concatenate([g.item_ids for g in ups]).astype(np.float64),
                item_grad=np.concatenate([g.item_grad.reshape(-1, self.layout.dim) for g in ups]),
                predictor_grad=np.stack([g.predictor_grad for g in ups]).reshape(n, -1),
            )
        atomic_write_bytes(path, encode_tensors(LOG_KIND, meta, arrays))
        lines = ["epoch\tround\tclient\trole"]
        lines += [f"{e}\t{r}\t{c}\t{role.value}" for (e, r, c), role in zip(self.index, self.roles)]
        atomic_write_text(sidecar_path(path), "\n".join(lines) + "\n")


def read_gradient_log(path):
    """Return ``(index, features, updates or None)`` from a log file."""
    meta, a = decode_tensors(Path(path).read_bytes(), expect_kind=LOG_KIND)
    index = a["index"].astype(np.int64)
    updates = None
    if meta["has_updates"]:
        uo = a["user_offsets"].astype(np.int64)
        io_ = a["item_offsets"].astype(np.int64)
        updates = []
        for k in range(meta["records"]):
            updates.append(SparseGradient(
                a["user_ids"][uo[k]:uo[k + 1]].astype(np.int64), a["user_grad"][uo[k]:uo[k + 1]],
                a["item_ids"][io_[k]:io_[k + 1]].astype(np.int64), a["item_grad"][io_[k]:io_[k + 1]],
                a["predictor_grad"][k]))
    return index, a["features"], updates


def read_roles(path):
    """Role labels keyed by ``(epoch, round, client)`` from the sidecar of ``path``."""
    roles = {}
    lines = sidecar_path(path).read_text().splitlines()
    for line in lines[1:]:
        e, r, c, role = line.split("\t")
        roles[(int(e), int(r), int(c))] = Role(role)
    return roles


def labelled_dataset(path):
    """Join a gradient log with its role sidecar into detector training data."""
    index, features, _ = read_gradient_log(path)
    roles = read_roles(path)
    labels = np.array([roles[tuple(int(v) for v in row)] is Role.BYZANTINE for row in index],
                      dtype=np.int64)
    return DetectorDataset(features, labels)
