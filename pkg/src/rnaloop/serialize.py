"""Versioned binary container for datasets, models, and controllers.

Layout: magic bytes, format version, a JSON header (kind, metadata, array
directory), a little-endian 64-bit payload blob, and a trailing SHA-256
checksum over everything before it. Arrays are float64 or int64 only.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import SerializationError

MAGIC = b"RNLB"
VERSION = 1

_DTYPES = {"f8": "<f8", "i8": "<i8"}


def _dtype_tag(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.floating):
        return "f8"
    if np.issubdtype(arr.dtype, np.integer):
        return "i8"
    raise SerializationError(f"unsupported array dtype {arr.dtype}")


def pack(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    directory = []
    blobs = []
    for name, arr in arrays.items():
        tag = _dtype_tag(arr)
        data = np.ascontiguousarray(arr).astype(_DTYPES[tag]).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": tag})
        blobs.append(data)
    header = json.dumps(
        {"kind": kind, "meta": meta, "arrays": directory},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    blob = b"".join(blobs)
    body = (
        MAGIC
        + struct.pack("<I", VERSION)
        + struct.pack("<Q", len(header))
        + header
        + struct.pack("<Q", len(blob))
        + blob
    )
    return body + hashlib.sha256(body).digest()


def unpack(data: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    if len(data) < 4 + 4 + 8 or data[:4] != MAGIC:
        raise SerializationError("not a container file (bad magic bytes)")
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise SerializationError(
            f"container version {version} is not supported by this build "
            f"(expected {VERSION}); regenerate the artifact with the current tool"
        )
    body, checksum = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise SerializationError("container checksum mismatch (file corrupt)")
    off = 8
    (hlen,) = struct.unpack("<Q", body[off : off + 8])
    off += 8
    header = json.loads(body[off : off + hlen].decode("utf-8"))
    off += hlen
    (blen,) = struct.unpack("<Q", body[off : off + 8])
    off += 8
    blob = body[off : off + blen]
    arrays = {}
    pos = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        arr = np.frombuffer(blob[pos : pos + nbytes], dtype=_DTYPES[entry["dtype"]])
        arrays[entry["name"]] = arr.reshape(shape).copy()
        pos += nbytes
    if pos != blen:
        raise SerializationError("container blob length does not match directory")
    return header["kind"], header["meta"], arrays


def save(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Atomic write: the target never holds a partial container."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(pack(kind, meta, arrays))
    os.replace(tmp, path)


def load(path: str | Path, expect_kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        from .errors import ArtifactError

        raise ArtifactError(f"artifact not found: {path}")
    kind, meta, arrays = unpack(path.read_bytes())
    if expect_kind is not None and kind != expect_kind:
        raise SerializationError(f"expected a {expect_kind!r} container, found {kind!r} in {path}")
    return kind, meta, arrays
