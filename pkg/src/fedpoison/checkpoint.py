"""Versioned binary tensor files for model and detector checkpoints.

Layout: 8-byte magic, little-endian uint32 format version, uint32 header
length, UTF-8 JSON header, then each array as row-major little-endian
float64 in header order.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"FPSIMCK\x00"
FORMAT_VERSION = 1


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_tensors(kind, meta, arrays):
    """Serialize named float64 arrays plus a JSON-able ``meta`` dict."""
    names = list(arrays)
    header = {
        "kind": kind,
        "version": FORMAT_VERSION,
        "meta": meta,
        "tensors": [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head]
    for n in names:
        parts.append(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
    return b"".join(parts)


def decode_tensors(data, expect_kind=None):
    if data[:8] != MAGIC:
        raise ValueError("not a fedpoison tensor file (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor file version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if expect_kind is not None and header["kind"] != expect_kind:
        raise ValueError(f"expected a {expect_kind!r} file, found {header['kind']!r}")
    offset = 16 + hlen
    arrays = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[spec["name"]] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ValueError("trailing bytes in tensor file")
    return header["meta"], arrays


def save_model(path, params):
    lay = params.layout
    meta = {
        "num_users": lay.num_users,
        "num_items": lay.num_items,
        "dim": lay.dim,
        "predictor": lay.predictor.value,
    }
    users, items, pred = lay.split(params.vector)
    atomic_write_bytes(path, encode_tensors("model", meta,
                                            {"user_table": users, "item_table": items,
                                             "predictor": pred}))


def load_model(path):
    from fedpoison.model import ModelParams, ParamLayout, PredictorKind

    meta, arrays = decode_tensors(Path(path).read_bytes(), expect_kind="model")
    layout = ParamLayout(meta["num_users"], meta["num_items"], meta["dim"],
                         PredictorKind(meta["predictor"]))
    vec = np.concatenate([arrays["user_table"].ravel(), arrays["item_table"].ravel(),
                          arrays["predictor"].ravel()])
    return ModelParams(layout, vec)
