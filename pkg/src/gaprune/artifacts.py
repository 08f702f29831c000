"""Binary artifact envelope and fingerprints.

Every binary artifact (checkpoint, score dump, mask) has the same layout::

    b"GAPR" | u32 version | u64 header length | header JSON (UTF-8) | payload

The header is canonical JSON (sorted keys, no whitespace) and always
carries ``header_fnv1a``: the FNV-1a 64 hash of the header serialized
without that field.  Payload arrays are raw little-endian float64, or
bit-packed uint8 for masks, at the byte offsets the header lists.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from gaprune.errors import IntegrityError

MAGIC = b"GAPR"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def fnv1a64_hex(data: bytes) -> str:
    return f"{fnv1a64(data):016x}"


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def file_sha256(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_envelope(path: Path | str, header: dict, payload: bytes) -> None:
    header = dict(header)
    header.pop("header_fnv1a", None)
    header["header_fnv1a"] = fnv1a64_hex(canonical_json(header))
    raw = canonical_json(header)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(raw)))
        fh.write(raw)
        fh.write(payload)


def read_envelope(path: Path | str) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a GAPR artifact")
    version, n = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(data[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header ({exc})") from None
    stored = header.pop("header_fnv1a", None)
    if stored != fnv1a64_hex(canonical_json(header)):
        raise IntegrityError(f"{path}: header fingerprint mismatch")
    return header, data[16 + n:]


def write_arrays(path: Path | str, header: dict, arrays: dict) -> None:
    """Envelope holding named float64 arrays; offsets go in ``header["tensors"]``."""
    tensors, chunks, offset = [], [], 0
    for name, v in arrays.items():
        raw = np.ascontiguousarray(v, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(np.shape(v)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    write_envelope(path, {**header, "tensors": tensors}, b"".join(chunks))


def read_arrays(path: Path | str, kind: str) -> tuple[dict, dict]:
    header, payload = read_envelope(path)
    if header.get("kind") != kind:
        raise IntegrityError(f"{path}: expected a {kind} artifact, found {header.get('kind')!r}")
    arrays = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        if t["offset"] + 8 * n > len(payload):
            raise IntegrityError(f"{path}: truncated payload")
        arrays[t["name"]] = np.frombuffer(payload, "<f8", n, t["offset"]).astype(np.float64).reshape(t["shape"])
    return header, arrays
