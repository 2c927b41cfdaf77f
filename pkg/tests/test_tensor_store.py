"""Round-trip and format-failure coverage for the binary weight store."""

import json
import os

import numpy as np
import pytest

from chaosmark import tensor_store
from chaosmark.chaos import ChaoticParams
from chaosmark.tensor_store import (
    BadMagicError,
    FormatError,
    ModelWeights,
    TruncatedFileError,
    UnknownLayerError,
    UnsupportedVersionError,
    WeightTensor,
)


def small_model(dtype=np.float64):
    a = np.arange(6, dtype=dtype).reshape(2, 3) / 7.0
    b = np.array([0.5, -0.25, 1.0 / 3.0], dtype=dtype)
    return ModelWeights([WeightTensor("dense0/kernel", a), WeightTensor("dense0/bias", b)])


def test_round_trip_is_bit_exact(tmp_path):
    path = tmp_path / "m.cwmt"
    original = small_model()
    tensor_store.save_weights(original, path)
    loaded = tensor_store.load_weights(path)
    assert loaded.names() == original.names()
    for name in original.names():
        got = loaded.layer(name)
        want = original.layer(name)
        assert got.data.dtype == want.data.dtype
        assert np.array_equal(got.data, want.data)


def test_round_trip_float32(tmp_path):
    path = tmp_path / "m32.cwmt"
    original = small_model(np.float32)
    tensor_store.save_weights(original, path)
    loaded = tensor_store.load_weights(path)
    assert loaded.layer("dense0/kernel").data.dtype == np.float32
    assert np.array_equal(loaded.layer("dense0/kernel").data,
                          original.layer("dense0/kernel").data)


def test_tensor_order_preserved(tmp_path):
    path = tmp_path / "ordered.cwmt"
    model = ModelWeights([
        WeightTensor("b", np.zeros(2)),
        WeightTensor("a", np.ones(2)),
    ])
    tensor_store.save_weights(model, path)
    assert tensor_store.load_weights(path).names() == ["b", "a"]


def test_empty_collection_unserializable(tmp_path):
    with pytest.raises(FormatError):
        tensor_store.save_weights(ModelWeights([]), tmp_path / "empty.cwmt")


def test_duplicate_names_rejected():
    with pytest.raises(FormatError):
        ModelWeights([WeightTensor("x", np.zeros(2)), WeightTensor("x", np.ones(2))])


def test_zero_extent_rejected():
    with pytest.raises(FormatError):
        WeightTensor("x", np.zeros((2, 0)))


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.cwmt"
    tensor_store.save_weights(small_model(), path)
    payload = bytearray(path.read_bytes())
    payload[:4] = b"NOPE"
    path.write_bytes(bytes(payload))
    with pytest.raises(BadMagicError):
        tensor_store.load_weights(path)


def test_unsupported_version(tmp_path):
    path = tmp_path / "future.cwmt"
    tensor_store.save_weights(small_model(), path)
    payload = bytearray(path.read_bytes())
    payload[4] = 99  # version byte sits right after the magic
    path.write_bytes(bytes(payload))
    with pytest.raises(UnsupportedVersionError):
        tensor_store.load_weights(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "cut.cwmt"
    tensor_store.save_weights(small_model(), path)
    payload = path.read_bytes()
    path.write_bytes(payload[: len(payload) - 5])
    with pytest.raises(TruncatedFileError):
        tensor_store.load_weights(path)


def test_flatten_is_row_major():
    model = ModelWeights([WeightTensor("k", np.array([[1.0, 2.0], [3.0, 4.0]]))])
    assert tensor_store.flatten_layer(model, "k").tolist() == [1.0, 2.0, 3.0, 4.0]


def test_unflatten_inverts_flatten():
    rng = np.random.default_rng(0)
    for shape in [(4,), (2, 3), (2, 2, 2)]:
        data = rng.normal(size=shape)
        model = ModelWeights([WeightTensor("k", data)])
        flat = tensor_store.flatten_layer(model, "k")
        rebuilt = tensor_store.unflatten_layer(model, "k", flat)
        assert np.array_equal(rebuilt.layer("k").data, data)


def test_unknown_layer():
    with pytest.raises(UnknownLayerError):
        tensor_store.flatten_layer(small_model(), "foo")


def test_digest_stability():
    assert small_model().digest() == small_model().digest()
    other = small_model()
    changed = other.with_layer("dense0/bias", np.array([9.0, 9.0, 9.0]))
    assert changed.digest() != other.digest()


class TestManifest:
    def params(self):
        return ChaoticParams(r=3.9, x0=0.5, epsilon=0.01, length=6)

    def test_round_trip_full_precision(self, tmp_path):
        path = tmp_path / "wm.json"
        # awkward reals that do not have short decimal forms
        params = ChaoticParams(r=3.9000000000000004, x0=1 / 3, epsilon=0.01 / 3, length=6)
        manifest = tensor_store.new_manifest("m1", "dense0/kernel", params, "abc")
        tensor_store.save_manifest(manifest, path)
        loaded = tensor_store.load_manifest(path)
        assert loaded.params.r == params.r
        assert loaded.params.x0 == params.x0
        assert loaded.params.epsilon == params.epsilon
        assert loaded.layer == "dense0/kernel"
        assert loaded.created_at == manifest.created_at

    def test_unknown_extra_field_ignored(self, tmp_path):
        path = tmp_path / "wm.json"
        manifest = tensor_store.new_manifest("m1", "dense0/kernel", self.params(), "")
        tensor_store.save_manifest(manifest, path)
        record = json.loads(path.read_text())
        record["future_field"] = [1, 2, 3]
        path.write_text(json.dumps(record))
        assert tensor_store.load_manifest(path).model_id == "m1"

    def test_missing_field_is_format_error(self, tmp_path):
        path = tmp_path / "wm.json"
        manifest = tensor_store.new_manifest("m1", "dense0/kernel", self.params(), "")
        tensor_store.save_manifest(manifest, path)
        record = json.loads(path.read_text())
        del record["epsilon"]
        path.write_text(json.dumps(record))
        with pytest.raises(FormatError):
            tensor_store.load_manifest(path)

    def test_check_manifest_absent_layer_raises(self):
        manifest = tensor_store.new_manifest("m1", "nope/kernel", self.params(), "")
        with pytest.raises(UnknownLayerError):
            tensor_store.check_manifest(manifest, small_model())

    def test_check_manifest_digest_mismatch_warns(self):
        model = small_model()
        manifest = tensor_store.new_manifest(
            "m1", "dense0/kernel", self.params(), "0" * 64
        )
        warnings = tensor_store.check_manifest(manifest, model)
        assert len(warnings) == 1
        assert "digest" in warnings[0]

    def test_check_manifest_clean(self):
        model = small_model()
        manifest = tensor_store.new_manifest(
            "m1", "dense0/kernel", self.params(), model.digest()
        )
        assert tensor_store.check_manifest(manifest, model) == []

    def test_timestamp_honors_source_date_epoch(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
        manifest = tensor_store.new_manifest("m", "dense0/kernel", self.params(), "")
        assert manifest.created_at.startswith("1970-01-01T00:00:00")


def test_atomic_write_replaces_not_appends(tmp_path):
    dest = tmp_path / "out.txt"
    tensor_store.atomic_write_text(dest, "first")
    tensor_store.atomic_write_text(dest, "second")
    assert dest.read_text() == "second"
    # no temp files left behind
    assert os.listdir(tmp_path) == ["out.txt"]
