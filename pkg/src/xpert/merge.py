"""Task arithmetic over model weights plus the snapshot file format.

Weight layout on disk: magic "XPERTSNAP\\0", u32 version (=1), u32 header
length, a JSON header mapping tensor name -> {dtype, shape, offset,
byte_len}, the raw little-endian f32 payload in header order, and a
trailing 8-byte FNV-1a-64 checksum of header+payload.

Snapshots store f32; differences and merge accumulation run in f64 so a
single task vector at weight 1 restores the personalized weights
bit-exactly after the one final rounding back to f32.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from xpert.vectorspace import Coordinate

SNAPSHOT_MAGIC = b"XPERTSNAP\0"
SNAPSHOT_VERSION = 1
_PRELUDE = struct.Struct("<II")  # version, header length

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_FNV_MASK = 0xFFFFFFFFFFFFFFFF


class SnapshotError(ValueError):
    """Raised when snapshot bytes are malformed or corrupted."""


def fnv1a_64(data: bytes) -> int:
    value = _FNV_OFFSET
    for byte in data:
        value = ((value ^ byte) * _FNV_PRIME) & _FNV_MASK
    return value


def _freeze_f32(name: str, values) -> np.ndarray:
    array = np.array(values, dtype=np.float32)
    if array.size and not np.isfinite(array).all():
        raise ValueError(f"tensor {name!r} has non-finite values")
    array.setflags(write=False)
    return array


class TensorSnapshot:
    """Named flat f32 tensors; the operand of all weight arithmetic.

    Tensor order is preserved and significant: it fixes the payload
    layout, the fingerprint, and merge reporting.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        frozen: dict[str, np.ndarray] = {}
        for name, values in tensors.items():
            if not isinstance(name, str) or not name:
                raise ValueError("tensor names must be non-empty strings")
            frozen[name] = _freeze_f32(name, values)
        self._tensors = frozen
        self._fingerprint: str | None = None

    @property
    def tensors(self) -> dict[str, np.ndarray]:
        return self._tensors

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._tensors)

    def _header_and_payload(self) -> tuple[bytes, list[bytes]]:
        entries = {}
        chunks = []
        offset = 0
        for name, array in self._tensors.items():
            raw = array.astype("<f4", copy=False).tobytes(order="C")
            entries[name] = {"dtype": "f4", "shape": list(array.shape),
                             "offset": offset, "byte_len": len(raw)}
            chunks.append(raw)
            offset += len(raw)
        header = json.dumps(entries, separators=(",", ":")).encode("ascii")
        return header, chunks

    def serialize(self) -> bytes:
        header, chunks = self._header_and_payload()
        payload = b"".join(chunks)
        checksum = fnv1a_64(header + payload)
        return (SNAPSHOT_MAGIC + _PRELUDE.pack(SNAPSHOT_VERSION, len(header))
                + header + payload + struct.pack("<Q", checksum))

    @property
    def fingerprint(self) -> str:
        # content hash over the same logical bytes as the file body; the
        # cheap digest here avoids paying the byte-wise checksum on every
        # in-memory comparison
        if self._fingerprint is None:
            digest = hashlib.sha256()
            header, chunks = self._header_and_payload()
            digest.update(SNAPSHOT_MAGIC)
            digest.update(_PRELUDE.pack(SNAPSHOT_VERSION, len(header)))
            digest.update(header)
            for chunk in chunks:
                digest.update(chunk)
            self._fingerprint = digest.hexdigest()
        return self._fingerprint

    @classmethod
    def deserialize(cls, data: bytes) -> "TensorSnapshot":
        floor = len(SNAPSHOT_MAGIC) + _PRELUDE.size + 8
        if len(data) < floor:
            raise SnapshotError("truncated snapshot: missing prelude")
        if data[:len(SNAPSHOT_MAGIC)] != SNAPSHOT_MAGIC:
            raise SnapshotError("magic mismatch: not a snapshot file")
        version, header_len = _PRELUDE.unpack_from(data, len(SNAPSHOT_MAGIC))
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"unsupported snapshot version {version}")
        header_start = len(SNAPSHOT_MAGIC) + _PRELUDE.size
        payload_start = header_start + header_len
        if payload_start + 8 > len(data):
            raise SnapshotError("truncated snapshot: header exceeds file")
        header = data[header_start:payload_start]
        payload = data[payload_start:-8]
        try:
            entries = json.loads(header)
        except ValueError as err:
            raise SnapshotError(f"unreadable header: {err}") from err
        if not isinstance(entries, dict):
            raise SnapshotError("unreadable header: not an object")
        layout: list[tuple[str, tuple[int, ...], int, int]] = []
        expected_offset = 0
        for name, entry in entries.items():
            try:
                dtype = entry["dtype"]
                shape = tuple(int(s) for s in entry["shape"])
                offset = int(entry["offset"])
                byte_len = int(entry["byte_len"])
            except (TypeError, KeyError, ValueError) as err:
                raise SnapshotError(
                    f"bad header entry for {name!r}: {err}") from err
            if dtype != "f4":
                raise SnapshotError(f"unsupported dtype {dtype!r} for {name!r}")
            if byte_len != 4 * math.prod(shape) or offset != expected_offset:
                raise SnapshotError(f"inconsistent layout for {name!r}")
            layout.append((name, shape, offset, byte_len))
            expected_offset = offset + byte_len
        if expected_offset > len(payload):
            raise SnapshotError("truncated snapshot: payload too short")
        if expected_offset != len(payload):
            raise SnapshotError("payload size does not match header")
        (stored,) = struct.unpack_from("<Q", data, len(data) - 8)
        if fnv1a_64(header + payload) != stored:
            raise SnapshotError("checksum mismatch: snapshot corrupted")
        tensors: dict[str, np.ndarray] = {}
        for name, shape, offset, byte_len in layout:
            flat = np.frombuffer(payload, dtype="<f4",
                                 count=byte_len // 4, offset=offset)
            tensors[name] = flat.reshape(shape).copy()
        return cls(tensors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorSnapshot):
            return NotImplemented
        if self.names != other.names:
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._tensors.values(), other._tensors.values()))

    __hash__ = None  # mutable container semantics; compare by content

    def __repr__(self) -> str:
        total = sum(a.size for a in self._tensors.values())
        return (f"TensorSnapshot({len(self._tensors)} tensors, "
                f"{total} parameters)")


def write_snapshot(snapshot: TensorSnapshot, path) -> None:
    path = Path(path)
    staging = path.with_name(path.name + ".tmp")
    staging.write_bytes(snapshot.serialize())
    os.replace(staging, path)


def read_snapshot(path) -> TensorSnapshot:
    return TensorSnapshot.deserialize(Path(path).read_bytes())


@dataclass(frozen=True, eq=False)
class TaskVector:
    """Elementwise weight difference personalized - base.

    Data lives in f64: adding it back onto the base in doubles and
    rounding once recovers the original f32 weights exactly, which f32
    difference storage provably cannot.
    """

    tensors: dict[str, np.ndarray]
    base_fingerprint: str
    model_id: str = ""

    def __post_init__(self):
        frozen = {}
        for name, values in self.tensors.items():
            array = np.array(values, dtype=np.float64)
            if array.size and not np.isfinite(array).all():
                raise ValueError(f"tensor {name!r} has non-finite values")
            array.setflags(write=False)
            frozen[name] = array
        object.__setattr__(self, "tensors", frozen)


def _first_structure_mismatch(base: TensorSnapshot,
                              other_names: tuple[str, ...],
                              other_shapes: dict[str, tuple]) -> str | None:
    for name in base.names:
        if name not in other_shapes:
            return f"tensor {name!r} missing"
        if other_shapes[name] != base.tensors[name].shape:
            return (f"tensor {name!r} shape {other_shapes[name]} != "
                    f"{base.tensors[name].shape}")
    for name in other_names:
        if name not in base.tensors:
            return f"unexpected tensor {name!r}"
    return None


def task_vector(base: TensorSnapshot, model: TensorSnapshot,
                model_id: str = "") -> TaskVector:
    """Difference model - base with matching structure enforced."""
    problem = _first_structure_mismatch(
        base, model.names,
        {name: array.shape for name, array in model.tensors.items()})
    if problem is not None:
        raise ValueError(f"snapshot structure mismatch: {problem}")
    diffs = {
        name: model.tensors[name].astype(np.float64)
        - base.tensors[name].astype(np.float64)
        for name in base.names}
    return TaskVector(tensors=diffs, base_fingerprint=base.fingerprint,
                      model_id=model_id)


def merge(base: TensorSnapshot,
          weighted: Iterable[tuple[TaskVector, float]]) -> TensorSnapshot:
    """base + sum of alpha-scaled task vectors, rounded to f32 once.

    Accumulation runs in f64 in input order, so results are deterministic
    and a singleton at alpha 1 restores its source snapshot bit-exactly.
    """
    weighted = list(weighted)
    if not weighted:
        raise ValueError("merge needs at least one task vector")
    for tv, _ in weighted:
        if tv.base_fingerprint != base.fingerprint:
            raise ValueError(
                f"task vector {tv.model_id!r} has base fingerprint "
                f"{tv.base_fingerprint[:12]}.., expected "
                f"{base.fingerprint[:12]}..")
        problem = _first_structure_mismatch(
            base, tuple(tv.tensors),
            {name: array.shape for name, array in tv.tensors.items()})
        if problem is not None:
            raise ValueError(
                f"task vector {tv.model_id!r} structure mismatch: {problem}")
    accumulator = {name: array.astype(np.float64)
                   for name, array in base.tensors.items()}
    for tv, alpha in weighted:
        alpha = float(alpha)
        for name in accumulator:
            accumulator[name] = accumulator[name] + alpha * tv.tensors[name]
    rounded = {}
    for name, array in accumulator.items():
        with np.errstate(over="ignore"):  # overflow checked right below
            out = array.astype(np.float32)
        if out.size and not np.isfinite(out).all():
            raise ValueError(
                f"merged tensor {name!r} is not finite in f32")
        rounded[name] = out
    return TensorSnapshot(rounded)


def merged_explanation(plan, coordinates: Mapping[str, Coordinate]
                       ) -> Coordinate:
    """Predicted coordinate of a merged model: the alpha-weighted sum of
    member coordinates, supported on the union of member supports.

    ``plan`` may be a MergePlan-like object (anything with a ``members``
    list of (model_id, alpha)) or that list directly.
    """
    members = list(getattr(plan, "members", plan))
    if not members:
        raise ValueError("plan has no members")
    fingerprints = set()
    for model_id, _ in members:
        if model_id not in coordinates:
            raise ValueError(f"no coordinate for member {model_id!r}")
        fingerprints.add(coordinates[model_id].basis_fingerprint)
    if len(fingerprints) != 1:
        raise ValueError("member coordinates mix basis fingerprints")
    entries: dict[int, float] = {}
    for model_id, alpha in members:
        alpha = float(alpha)
        for index, value in coordinates[model_id].entries.items():
            entries[index] = entries.get(index, 0.0) + alpha * value
    return Coordinate(basis_fingerprint=next(iter(fingerprints)),
                      entries=entries)
