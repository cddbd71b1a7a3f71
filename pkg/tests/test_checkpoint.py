import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from boom.checkpoint import (
    BadMagicError, Checkpoint, CheckpointError, CorruptCheckpointError, IncompatibleError,
    NonFiniteError, TruncatedPayloadError, UnsupportedVersionError, as_flat_vector,
    check_compatible, digest, from_bytes, is_compatible, load_checkpoint, save_checkpoint, to_bytes,
)

META = {"arch_id": "t", "seed": "0", "train_examples": "0"}


def ckpt(**tensors):
    return Checkpoint(tensors, META)


def test_empty_checkpoint_roundtrip(tmp_path):
    c = Checkpoint({}, META)
    p = tmp_path / "e.ckpt"
    save_checkpoint(c, p)
    assert load_checkpoint(p) == c
    raw = p.read_bytes()
    magic, version, hlen = struct.unpack_from("<8sIQ", raw)
    assert (magic, version) == (b"BOOMCKPT", 1)
    assert len(raw) == 20 + hlen  # header only, no payload


def test_small_tensor_bit_exact(tmp_path):
    c = ckpt(w=np.array([[1, 2], [3, 4]], dtype=np.float32))
    p = tmp_path / "w.ckpt"
    save_checkpoint(c, p)
    back = load_checkpoint(p)
    assert back == c
    assert back["w"].tobytes() == np.array([1, 2, 3, 4], dtype="<f4").tobytes()


def test_save_twice_same_bytes(tmp_path):
    c = ckpt(w=np.arange(6, dtype=np.float32).reshape(2, 3), b=np.ones(3))
    save_checkpoint(c, tmp_path / "a")
    save_checkpoint(c, tmp_path / "b")
    ha = hashlib.sha256((tmp_path / "a").read_bytes()).hexdigest()
    hb = hashlib.sha256((tmp_path / "b").read_bytes()).hexdigest()
    assert ha == hb == digest(c)


def test_insertion_order_irrelevant():
    a = Checkpoint({"x": [1.0], "a": [2.0]}, META)
    b = Checkpoint({"a": [2.0], "x": [1.0]}, META)
    assert to_bytes(a) == to_bytes(b)
    assert a.names == ("a", "x")


def test_header_layout():
    c = ckpt(b=np.zeros(3), a=np.zeros((2, 2)))
    raw = to_bytes(c)
    _, _, hlen = struct.unpack_from("<8sIQ", raw)
    head = json.loads(raw[20:20 + hlen])
    assert [t["name"] for t in head["tensors"]] == ["a", "b"]
    assert [t["offset"] for t in head["tensors"]] == [0, 16]
    assert head["meta"] == META
    assert len(raw) - 20 - hlen == 7 * 4


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(
    st.text(alphabet=st.characters(blacklist_categories=("Cc", "Cs")), min_size=1, max_size=8),
    hnp.arrays(np.float32, hnp.array_shapes(max_dims=3, max_side=4),
               elements=st.floats(-1e6, 1e6, width=32)),
    max_size=4))
def test_roundtrip_property(tensors):
    c = Checkpoint(tensors, {**META, "extra": "ünïcode"})
    assert from_bytes(to_bytes(c)) == c


def test_bad_magic():
    raw = bytearray(to_bytes(ckpt(w=[1.0])))
    raw[0:8] = b"NOTACKPT"
    with pytest.raises(BadMagicError):
        from_bytes(bytes(raw))


def test_unsupported_version():
    raw = bytearray(to_bytes(ckpt(w=[1.0])))
    raw[8:12] = struct.pack("<I", 2)
    with pytest.raises(UnsupportedVersionError):
        from_bytes(bytes(raw))


def test_payload_four_bytes_short():
    raw = to_bytes(ckpt(w=np.ones((2, 2))))
    with pytest.raises(TruncatedPayloadError):
        from_bytes(raw[:-4])


def test_header_length_past_end():
    raw = bytearray(to_bytes(ckpt(w=[1.0])))
    raw[12:20] = struct.pack("<Q", 10_000)
    with pytest.raises(TruncatedPayloadError):
        from_bytes(bytes(raw))


def test_trailing_bytes_rejected():
    with pytest.raises(CorruptCheckpointError):
        from_bytes(to_bytes(ckpt(w=[1.0])) + b"\0\0\0\0")


def test_nonfinite_in_file_rejected():
    raw = bytearray(to_bytes(ckpt(w=[1.0, 2.0])))
    raw[-4:] = struct.pack("<f", float("nan"))
    with pytest.raises(NonFiniteError):
        from_bytes(bytes(raw))


def test_nonfinite_rejected_before_write(tmp_path):
    with pytest.raises(NonFiniteError):
        ckpt(w=[1.0, np.inf])
    assert not list(tmp_path.iterdir())


@pytest.mark.parametrize("meta", [
    {"arch_id": "t", "seed": "0"},
    {"arch_id": "t", "seed": "0", "train_examples": "-3"},
    {"arch_id": "t", "seed": "0", "train_examples": "1.5"},
])
def test_meta_requirements(meta):
    with pytest.raises(CheckpointError):
        Checkpoint({"w": [1.0]}, meta)


@pytest.mark.parametrize("name", ["", "a\nb", "tab\there"])
def test_bad_names(name):
    with pytest.raises(CheckpointError):
        Checkpoint({name: [1.0]}, META)


def test_tensors_are_read_only():
    c = ckpt(w=np.zeros(2))
    with pytest.raises(ValueError):
        c["w"][0] = 1.0


def test_as_flat_vector_row_major():
    assert as_flat_vector(np.array([[1, 2], [3, 4]])).tolist() == [1, 2, 3, 4]
    assert as_flat_vector(np.array([5])).tolist() == [5]
    assert as_flat_vector(np.arange(6).reshape(2, 3)).tolist() == list(range(6))


def test_compatibility_symmetric_reflexive():
    a = ckpt(w=np.zeros((2, 2)), b=np.zeros(2))
    b = ckpt(w=np.ones((2, 2)), b=np.ones(2))
    c = ckpt(w=np.zeros((2, 3)), b=np.zeros(2))
    assert is_compatible(a, a) and is_compatible(a, b) and is_compatible(b, a)
    assert not is_compatible(a, c) and not is_compatible(c, a)
    with pytest.raises(IncompatibleError):
        check_compatible([a, c])
    with pytest.raises(IncompatibleError):
        check_compatible([a], ckpt(w=np.zeros((2, 2))))
