"""Deterministic binary checkpoints.

Layout, all little-endian: magic ``HMCK``, u32 version, u64 header length,
the header as canonical JSON (sorted keys, no whitespace), every array's raw
float64 bytes in name-sorted order, and a trailing crc32 over everything
before it.  Writing the same state twice produces byte-identical files;
loading verifies magic, version and checksum.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, IntegrityError

MAGIC = b"HMCK"
VERSION = 1


@dataclass
class Checkpoint:
    stage: str
    meta: dict
    arrays: dict[str, np.ndarray]


def save_checkpoint(path, stage: str, meta: dict,
                    arrays: dict[str, np.ndarray]):
    """Atomically write a checkpoint (temp file + rename)."""
    names = sorted(arrays)
    header = {
        "stage": stage,
        "meta": meta,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<Q", len(hjson))
    buf += hjson
    for n in names:
        buf += np.ascontiguousarray(arrays[n], dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(bytes(buf))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    if len(blob) < 20:
        raise FormatError(f"{path}: too short to be a checkpoint")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise IntegrityError(f"{path}: checksum mismatch, file is corrupted")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    if 16 + hlen > len(blob) - 4:
        raise FormatError(f"{path}: header length {hlen} overruns the file")
    try:
        header = json.loads(blob[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from None
    for key in ("stage", "meta", "arrays"):
        if key not in header:
            raise FormatError(f"{path}: header missing {key!r}")
    arrays = {}
    off = 16 + hlen
    for item in header["arrays"]:
        shape = tuple(int(s) for s in item["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = off + n * 8
        if end > len(blob) - 4:
            raise FormatError(f"{path}: array {item['name']} truncated")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
        arrays[item["name"]] = arr.reshape(shape).astype(np.float64)
        off = end
    if off != len(blob) - 4:
        raise FormatError(f"{path}: {len(blob) - 4 - off} trailing bytes")
    return Checkpoint(header["stage"], header["meta"], arrays)
