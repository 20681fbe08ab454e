"""Binary container for named float arrays.

Layout::

    b"PDCK" | uint32 format version | uint64 header length | JSON header | array bytes

All integers and array payloads are little-endian. The header records the
artifact kind, free-form metadata, the stored precision and, per array, its
dtype, shape, byte offset and SHA-256 digest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PDCK"
FORMAT_VERSION = 1
_DTYPE_BITS = {"<f4": 32, "<f8": 64}


class ContainerError(ValueError):
    pass


class ChecksumError(ContainerError):
    pass


class PrecisionMismatch(ContainerError):
    pass


def write_container(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    bits = set()
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind != "f":
            raise ContainerError(f"array {name!r} is not floating point ({arr.dtype})")
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        dtype = le.dtype.str
        bits.add(_DTYPE_BITS[dtype])
        raw = le.tobytes()
        entries.append({
            "name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset,
            "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "kind": kind,
        "version": FORMAT_VERSION,
        "precision": max(bits) if bits else None,
        "meta": meta or {},
        "arrays": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != MAGIC:
            raise ContainerError(f"{path}: not a promptdoor container")
        version, hlen = struct.unpack("<IQ", head[4:])
        if version != FORMAT_VERSION:
            raise ContainerError(f"{path}: container version {version}, expected {FORMAT_VERSION}")
        try:
            return json.loads(fh.read(hlen))
        except json.JSONDecodeError as exc:
            raise ContainerError(f"{path}: corrupt header ({exc})") from None


def read_container(path, precision: int | None = None, allow_cast: bool = False) -> tuple[dict, dict[str, np.ndarray]]:
    """Load and verify a container; returns ``(header, arrays)``.

    When ``precision`` differs from the stored precision the load is refused
    unless ``allow_cast`` is set, in which case arrays are converted and
    ``header["cast_from"]`` records the original precision.
    """
    path = Path(path)
    header = read_header(path)
    data = path.read_bytes()
    hlen = struct.unpack("<Q", data[8:16])[0]
    base = 16 + hlen
    stored = header.get("precision")
    if precision is not None and stored is not None and precision != stored:
        if not allow_cast:
            raise PrecisionMismatch(f"{path}: stored at {stored}-bit, requested {precision}-bit")
        header["cast_from"] = stored
    arrays = {}
    for e in header["arrays"]:
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"] or hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise ChecksumError(f"{path}: checksum mismatch for array {e['name']!r}")
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"])
        target = {32: np.float32, 64: np.float64}[precision] if precision else arr.dtype.newbyteorder("=")
        arrays[e["name"]] = arr.astype(target)
    return header, arrays


def checksum(arrays: dict[str, np.ndarray]) -> str:
    """Order-independent digest over array names, shapes and bytes."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
