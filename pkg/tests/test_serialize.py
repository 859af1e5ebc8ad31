import json
import struct

import numpy as np
import pytest

from mobileone.reparam import calibrate_model, reparameterize_model
from mobileone.serialize import (
    MAGIC,
    FormatError,
    describe_model,
    load_model,
    model_from_descriptor,
    read_tensors,
    save_model,
)
from mobileone.train import ToyNetConfig, build_toy_net


@pytest.fixture
def toy_model():
    model = build_toy_net(ToyNetConfig(channels=(4, 8), classes=3, k=2, seed=7))
    rng = np.random.default_rng(7)
    calibrate_model(model, rng.standard_normal((8, 3, 16, 16)).astype(np.float32))
    return model


def _logits(model, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
    return model.forward(x, mode="eval")


def test_save_load_is_bit_identical(toy_model, tmp_path):
    path = tmp_path / "toy.mob1"
    save_model(toy_model, path)
    again = load_model(path)
    np.testing.assert_array_equal(_logits(toy_model), _logits(again))
    for (na, a), (nb, b) in zip(toy_model.named_tensors(), again.named_tensors()):
        assert na == nb
        np.testing.assert_array_equal(a, b)
        assert a.dtype == b.dtype


def test_folded_model_round_trips(toy_model, tmp_path):
    folded = reparameterize_model(toy_model)
    path = tmp_path / "folded.mob1"
    save_model(folded, path)
    again = load_model(path)
    assert again.mode == "inference"
    np.testing.assert_array_equal(_logits(folded), _logits(again))


def test_sidecar_mirrors_the_header(toy_model, tmp_path):
    path = tmp_path / "toy.mob1"
    save_model(toy_model, path)
    sidecar = json.loads((tmp_path / "toy.mob1.json").read_text())
    assert sidecar["magic"] == "MOB1"
    assert sidecar["version"] == 1
    names = {t["name"] for t in sidecar["tensors"]}
    assert "meta/model" in names
    stored = set(read_tensors(path))
    assert names == stored


def test_descriptor_round_trip(toy_model):
    desc = describe_model(toy_model)
    rebuilt = model_from_descriptor(desc)
    assert describe_model(rebuilt) == desc
    want = [n for n, _ in toy_model.named_tensors()]
    got = [n for n, _ in rebuilt.named_tensors()]
    assert want == got


def test_bad_magic_is_rejected(toy_model, tmp_path):
    path = tmp_path / "toy.mob1"
    save_model(toy_model, path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"Z" * 4
    path.write_bytes(raw)
    with pytest.raises(FormatError, match="magic"):
        load_model(path)


def test_unknown_version_is_rejected(toy_model, tmp_path):
    path = tmp_path / "toy.mob1"
    save_model(toy_model, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(raw)
    with pytest.raises(FormatError, match="version"):
        load_model(path)


def test_truncated_file_is_rejected(toy_model, tmp_path):
    path = tmp_path / "toy.mob1"
    save_model(toy_model, path)
    raw = path.read_bytes()
    for cut in (3, 10, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_model(path)


def test_meta_record_is_required(toy_model, tmp_path):
    # a container holding only weights, no structure record
    path = tmp_path / "bare.mob1"
    tensors = list(toy_model.named_tensors())
    from mobileone.serialize import _pack_records

    header, payload = _pack_records(tensors)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", 1, len(tensors)))
        fh.write(header)
        fh.write(payload)
    with pytest.raises(FormatError, match="structure record"):
        load_model(path)


def test_corrupt_json_meta_is_rejected(toy_model, tmp_path):
    path = tmp_path / "toy.mob1"
    save_model(toy_model, path)
    raw = bytearray(path.read_bytes())
    # the meta record is written first, so its payload starts the data
    # section; stomp a few bytes to break the JSON
    data_start = raw.rindex(b"{\"arch\"")
    raw[data_start : data_start + 4] = b"\xff\xfe\xfd\xfc"
    path.write_bytes(raw)
    with pytest.raises(FormatError, match="JSON|structure"):
        load_model(path)


def test_failed_load_returns_nothing(toy_model, tmp_path):
    """A rejected file must raise, never hand back a half-filled model."""
    path = tmp_path / "toy.mob1"
    save_model(toy_model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 40])
    try:
        model = load_model(path)
    except FormatError:
        model = None
    assert model is None


def test_read_tensors_returns_copies(toy_model, tmp_path):
    path = tmp_path / "toy.mob1"
    save_model(toy_model, path)
    tensors = read_tensors(path)
    name = next(n for n in tensors if n.endswith("weight"))
    before = tensors[name].copy()
    tensors[name][...] = -1.0
    assert not np.array_equal(before, tensors[name])
    fresh = read_tensors(path)
    np.testing.assert_array_equal(fresh[name], before)
