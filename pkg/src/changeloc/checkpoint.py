"""Model checkpoint files.

Layout (little-endian)::

    bytes 0-3    magic b"LCKP"
    bytes 4-7    u32 format version (1)
    bytes 8-11   u32 header length H
    bytes 12..   H bytes of UTF-8 JSON, keys sorted, no whitespace:
                 {"config": {...}, "section": "dfc" | "efc",
                  "tensors": [[name, [dim, ...]], ...]}
    then         every tensor in header order as float64, row-major

Tensors are listed in sorted name order, so equal parameters give equal bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .dataio import FormatError, MagicError, TruncationError, VersionError

CHECKPOINT_MAGIC = b"LCKP"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


class SectionError(FormatError):
    pass


def save_checkpoint(path, section: str, config: dict, arrays: dict[str, np.ndarray]) -> None:
    names = sorted(arrays)
    header = json.dumps(
        {"config": config, "section": section,
         "tensors": [[n, list(np.shape(arrays[n]))] for n in names]},
        sort_keys=True, separators=(",", ":")).encode()
    parts = [_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)), header]
    parts += [np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, section: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise TruncationError(f"{path}: too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise MagicError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < _PREFIX.size + hlen:
        raise TruncationError(f"{path}: header truncated")
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
    if section is not None and header["section"] != section:
        raise SectionError(f"{path}: section {header['section']!r}, expected {section!r}")
    offset = _PREFIX.size + hlen
    arrays = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * n
        if end > len(raw):
            raise TruncationError(f"{path}: tensor {name!r} truncated")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return header["config"], arrays
