"""Checkpoint container: length-framed JSON header plus raw float32 payload.

Layout: a 4-byte little-endian unsigned header length, the UTF-8 JSON header
{format_version, spec, tensors: [{name, shape, offset, len}], bitplan?}, then
the tensor payloads as little-endian IEEE-754 float32 in header order.
Offsets are relative to the start of the payload. Writes are atomic
(temp file + rename) and round trips are bitwise lossless.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bitsearch import BitPlan
from .model import NetworkSpec

CHECKPOINT_FORMAT_VERSION = 1
_MAX_HEADER_BYTES = 64 * 1024 * 1024


class CheckpointError(Exception):
    """Base class for container load failures."""


class HeaderError(CheckpointError):
    """Header length or JSON is unusable."""


class VersionError(CheckpointError):
    """Unsupported format_version."""


class PayloadError(CheckpointError):
    """Tensor payload truncated, overlapping, or inconsistent with the header."""


@dataclass
class Checkpoint:
    spec: NetworkSpec
    tensors: dict[str, np.ndarray]
    bitplan: Optional[BitPlan] = None

    def content_hash(self) -> str:
        """Digest over the canonical serialized form (header + payload)."""
        header, payload = _encode(self)
        return hashlib.sha256(header + payload).hexdigest()


def atomic_write_bytes(path, blob: bytes) -> None:
    """Write via a sibling temp file and rename so readers never see a torn file."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_framed(path, header: dict, payload: bytes) -> None:
    """Serialize the 4-byte length + JSON header + payload framing."""
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    atomic_write_bytes(path, struct.pack("<I", len(blob)) + blob + payload)


def read_framed(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise HeaderError("file too short for a header length field")
    (header_len,) = struct.unpack("<I", raw[:4])
    if header_len > _MAX_HEADER_BYTES or 4 + header_len > len(raw):
        raise HeaderError(f"header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[4:4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderError(f"header is not valid JSON: {e}") from e
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object")
    return header, raw[4 + header_len:]


def _encode(ckpt: Checkpoint) -> tuple[bytes, bytes]:
    chunks: list[bytes] = []
    entries = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "len": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": ckpt.spec.to_dict(),
        "tensors": entries,
    }
    if ckpt.bitplan is not None:
        header["bitplan"] = ckpt.bitplan.to_dict()
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(blob)) + blob, b"".join(chunks)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header, payload = _encode(ckpt)
    atomic_write_bytes(path, header + payload)


def load_checkpoint(path) -> Checkpoint:
    header, payload = read_framed(path)
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise VersionError(f"unsupported format_version {version!r}")
    if "spec" not in header or "tensors" not in header:
        raise HeaderError("header missing required fields")
    spans: list[tuple[int, int, str]] = []
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        offset, length = int(entry["offset"]), int(entry["len"])
        expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if length != expected:
            raise PayloadError(f"tensor {name!r}: len {length} != shape size {expected}")
        if offset < 0 or offset + length > len(payload):
            raise PayloadError(f"tensor {name!r}: payload truncated "
                               f"(need {offset + length} bytes, have {len(payload)})")
        spans.append((offset, offset + length, name))
        arr = np.frombuffer(payload, dtype="<f4", count=length // 4, offset=offset)
        tensors[name] = np.array(arr.reshape(shape), dtype=np.float32)
    spans.sort()
    for (_, end_a, name_a), (start_b, _, name_b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise PayloadError(f"tensors {name_a!r} and {name_b!r} overlap in the payload")
    plan = BitPlan.from_dict(header["bitplan"]) if "bitplan" in header else None
    return Checkpoint(spec=NetworkSpec.from_dict(header["spec"]),
                      tensors=tensors, bitplan=plan)
