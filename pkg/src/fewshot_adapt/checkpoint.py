"""Single-file checkpoint container.

Layout::

    8 bytes   magic  b"FSADAPT\\0"
    32 bytes  SHA-256 of everything after this field
    8 bytes   header length, little-endian unsigned
    header    UTF-8 JSON (sorted keys): version tag, metadata, array table
    payload   raw little-endian array bytes, concatenated in table order

Writing the same content twice gives byte-identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FSADAPT\x00"
VERSION_TAG = "fewshot_adapt-ckpt/1"


class ChecksumError(ValueError):
    pass


class VersionError(ValueError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def encode(meta: dict, arrays: dict[str, np.ndarray], version: str = VERSION_TAG) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = _le(np.asarray(arr))
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": version, "meta": meta, "arrays": table},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = struct.pack("<Q", len(header)) + header + b"".join(chunks)
    return MAGIC + hashlib.sha256(body).digest() + body


def decode(blob: bytes, expected_version: str = VERSION_TAG):
    if len(blob) < 48 or blob[:8] != MAGIC:
        raise ChecksumError("not a checkpoint file (bad magic)")
    digest, body = blob[8:40], blob[40:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch; file is corrupt or truncated")
    (hlen,) = struct.unpack("<Q", body[:8])
    header = json.loads(body[8:8 + hlen].decode("utf-8"))
    if header.get("version") != expected_version:
        raise VersionError(f"checkpoint version {header.get('version')!r} != supported {expected_version!r}")
    payload = body[8 + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        arrays[entry["name"]] = arr
    return header["meta"], arrays


def write(path, meta: dict, arrays: dict[str, np.ndarray], version: str = VERSION_TAG) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(meta, arrays, version))
    tmp.replace(path)
    return path


def read(path, expected_version: str = VERSION_TAG):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes(), expected_version)
