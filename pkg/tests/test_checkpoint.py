import struct

import numpy as np
import pytest

from fedpoison.checkpoint import (MAGIC, atomic_write_text, decode_tensors, encode_tensors,
                                  load_model, save_model)
from fedpoison.model import PredictorKind, init_params


@pytest.mark.parametrize("predictor", list(PredictorKind))
def test_model_roundtrip(tmp_path, predictor):
    params = init_params(5, 7, d=3, predictor_kind=predictor, seed=2)
    save_model(tmp_path / "m.bin", params)
    back = load_model(tmp_path / "m.bin")
    assert back == params
    assert back.layout == params.layout


def test_encoding_is_stable():
    arrays = {"a": np.arange(6.0).reshape(2, 3), "s": np.array(1.5)}
    blob = encode_tensors("model", {"x": 1}, arrays)
    assert blob.startswith(MAGIC)
    assert blob == encode_tensors("model", {"x": 1}, arrays)
    meta, back = decode_tensors(blob)
    assert meta == {"x": 1}
    np.testing.assert_array_equal(back["a"], arrays["a"])
    assert back["s"].shape == ()


def test_rejects_bad_files():
    blob = encode_tensors("detector", {}, {"w": np.ones(3)})
    with pytest.raises(ValueError, match="magic"):
        decode_tensors(b"XXXXXXXX" + blob[8:])
    with pytest.raises(ValueError, match="version"):
        decode_tensors(blob[:8] + struct.pack("<I", 99) + blob[12:])
    with pytest.raises(ValueError, match="expected"):
        decode_tensors(blob, expect_kind="model")
    with pytest.raises(ValueError, match="trailing"):
        decode_tensors(blob + b"\0" * 8)


def test_atomic_write_leaves_no_temp(tmp_path):
    target = tmp_path / "sub" / "out.csv"
    atomic_write_text(target, "a,b\n")
    atomic_write_text(target, "c,d\n")
    assert target.read_text() == "c,d\n"
    assert [p.name for p in target.parent.iterdir()] == ["out.csv"]
