"""In-memory checkpoints and the BOOMCKPT on-disk format.

A checkpoint is an ordered mapping of tensor name to a float32 array plus a
flat string->string ``meta`` map. Files are canonical: tensor names and meta
keys are written sorted, so saving the same value twice yields identical
bytes.

Layout (little-endian)::

    0..7    b"BOOMCKPT"
    8..11   u32 version (= 1)
    12..19  u64 header length H
    20..    H bytes of UTF-8 JSON {"tensors": [...], "meta": {...}}
    rest    raw float32 payload, tensors back to back in name order
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"BOOMCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
REQUIRED_META = ("arch_id", "seed", "train_examples")
DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    """Header bounds, shape or offset inconsistency."""


class NonFiniteError(CheckpointError):
    pass


class IncompatibleError(ValueError):
    """Raised when checkpoints do not share names and shapes."""


def _check_name(name):
    if not isinstance(name, str) or not name:
        raise CheckpointError(f"tensor name must be a non-empty string, got {name!r}")
    if any(unicodedata.category(ch) == "Cc" for ch in name):
        raise CheckpointError(f"tensor name {name!r} contains control characters")


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"tensor {name!r} has non-finite entries")


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Immutable named-tensor model.

    ``tensors`` is stored as a dict sorted by name holding read-only float32
    arrays. ``meta`` must carry ``arch_id``, ``seed`` and ``train_examples``
    (a non-negative integer count, used by size-proportional merge weights).
    """

    tensors: Mapping[str, np.ndarray]
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        tensors = {}
        for name in sorted(self.tensors):
            _check_name(name)
            arr = np.array(self.tensors[name], dtype=np.float32, order="C", copy=True)
            if any(d <= 0 for d in arr.shape):
                raise CheckpointError(f"tensor {name!r} has non-positive dimension {arr.shape}")
            _check_finite(name, arr)
            arr.setflags(write=False)
            tensors[name] = arr
        meta = {}
        for k in sorted(self.meta):
            v = self.meta[k]
            if not isinstance(k, str) or not isinstance(v, str):
                raise CheckpointError(f"meta entries must be strings: {k!r}={v!r}")
            meta[k] = v
        for key in REQUIRED_META:
            if key not in meta:
                raise CheckpointError(f"meta is missing required key {key!r}")
        try:
            n = int(meta["train_examples"])
        except ValueError:
            n = -1
        if n < 0 or str(n) != meta["train_examples"].strip():
            raise CheckpointError(
                f"meta['train_examples'] must be a non-negative integer, got {meta['train_examples']!r}")
        object.__setattr__(self, "tensors", tensors)
        object.__setattr__(self, "meta", meta)

    @property
    def names(self):
        return tuple(self.tensors)

    @property
    def shapes(self):
        return {k: v.shape for k, v in self.tensors.items()}

    @property
    def train_examples(self) -> int:
        return int(self.meta["train_examples"])

    def __getitem__(self, name):
        return self.tensors[name]

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.meta != other.meta or self.names != other.names:
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )

    def __hash__(self):
        return hash(digest(self))

    def with_meta(self, **updates) -> "Checkpoint":
        meta = dict(self.meta)
        meta.update({k: str(v) for k, v in updates.items()})
        return Checkpoint(self.tensors, meta)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def as_flat_vector(t: np.ndarray) -> np.ndarray:
    """Row-major flattening of a tensor."""
    return np.asarray(t).reshape(-1, order="C")


def is_compatible(a: Checkpoint, b: Checkpoint) -> bool:
    return a.shapes == b.shapes


def check_compatible(models: Iterable[Checkpoint], base: Checkpoint | None = None):
    models = list(models)
    ref = base if base is not None else (models[0] if models else None)
    if ref is None:
        return
    for i, m in enumerate(models):
        if m.names != ref.names:
            missing = set(ref.names) ^ set(m.names)
            raise IncompatibleError(f"model {i} tensor names differ: {sorted(missing)}")
        for name in ref.names:
            if m.tensors[name].shape != ref.tensors[name].shape:
                raise IncompatibleError(
                    f"model {i} tensor {name!r} has shape {m.tensors[name].shape}, "
                    f"expected {ref.tensors[name].shape}")


def _header(ckpt: Checkpoint) -> bytes:
    entries = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    doc = {"tensors": entries, "meta": dict(ckpt.meta)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    for name, arr in ckpt.tensors.items():
        _check_finite(name, arr)
    header = _header(ckpt)
    parts = [_PREFIX.pack(MAGIC, VERSION, len(header)), header]
    parts.extend(arr.astype(DTYPE, copy=False).tobytes(order="C") for arr in ckpt.tensors.values())
    return b"".join(parts)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        if data[:8] != MAGIC[: len(data[:8])]:
            raise BadMagicError("bad magic bytes")
        raise TruncatedPayloadError("file shorter than fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported BOOMCKPT version {version}")
    start = _PREFIX.size
    if hlen > len(data) - start:
        raise TruncatedPayloadError(f"header length {hlen} exceeds file size {len(data)}")
    try:
        doc = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"header is not valid UTF-8 JSON: {e}") from None
    if not isinstance(doc, dict) or set(doc) != {"tensors", "meta"}:
        raise CorruptCheckpointError("header must hold exactly 'tensors' and 'meta'")
    payload = memoryview(data)[start + hlen:]

    tensors = {}
    expected = 0
    prev_name = None
    for entry in doc["tensors"]:
        try:
            name, shape, offset = entry["name"], entry["shape"], entry["offset"]
        except (KeyError, TypeError):
            raise CorruptCheckpointError(f"malformed tensor entry {entry!r}") from None
        if prev_name is not None and name <= prev_name:
            raise CorruptCheckpointError("tensor entries are not sorted by name")
        prev_name = name
        if not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in shape):
            raise CorruptCheckpointError(f"tensor {name!r} has invalid shape {shape!r}")
        if offset != expected:
            raise CorruptCheckpointError(
                f"tensor {name!r} offset {offset} is not contiguous (expected {expected})")
        nbytes = math.prod(shape) * 4
        if offset + nbytes > len(payload):
            raise TruncatedPayloadError(
                f"payload truncated in tensor {name!r}: need {offset + nbytes} bytes, have {len(payload)}")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype=DTYPE).reshape(shape)
        _check_finite(name, arr)
        tensors[name] = arr
        expected = offset + nbytes
    if expected != len(payload):
        raise CorruptCheckpointError(f"{len(payload) - expected} trailing payload bytes")
    return Checkpoint(tensors, doc["meta"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = to_bytes(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return from_bytes(f.read())


def digest(ckpt: Checkpoint) -> str:
    """sha256 of the canonical serialization."""
    return hashlib.sha256(to_bytes(ckpt)).hexdigest()
