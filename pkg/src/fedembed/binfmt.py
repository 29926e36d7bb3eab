"""One CRC-checked binary container used by dataset files and checkpoints.

Layout (all little-endian):

    magic[4] | version u16 | n_header u16 | header i64 * n_header |
    n_arrays u8 | { dtype u8, count u64, raw values } * n_arrays | crc32 u32

dtype codes: 0 = float64, 1 = int64. The CRC covers every byte before it.
"""

from __future__ import annotations

import struct
import zlib
from typing import Sequence

import numpy as np

from .errors import FedEmbedError

VERSION = 1
DATASET_MAGIC = b"FDDS"
CHECKPOINT_MAGIC = b"FDCK"

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.int64): 1}


class FileFormatError(FedEmbedError):
    """Base class for container decode failures."""


class MalformedHeaderError(FileFormatError):
    pass


class TruncatedPayloadError(FileFormatError):
    pass


class ChecksumError(FileFormatError):
    pass


def pack_record(magic: bytes, header: Sequence[int], arrays: Sequence[np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    parts = [magic, struct.pack("<HH", VERSION, len(header))]
    parts.append(struct.pack(f"<{len(header)}q", *[int(h) for h in header]))
    parts.append(struct.pack("<B", len(arrays)))
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"unsupported array dtype {arr.dtype}")
        flat = arr.ravel().astype(_DTYPES[code], copy=False)
        parts.append(struct.pack("<BQ", code, flat.size))
        parts.append(flat.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(
                f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def unpack_record(data: bytes, magic: bytes) -> tuple[tuple[int, ...], list[np.ndarray]]:
    """Decode a container, raising a distinct error per failure mode."""
    cur = _Cursor(data)
    seen_magic = cur.take(4)
    if seen_magic != magic:
        raise MalformedHeaderError(f"bad magic {seen_magic!r}, expected {magic!r}")
    version, n_header = struct.unpack("<HH", cur.take(4))
    if version != VERSION:
        raise MalformedHeaderError(f"unsupported version {version}")
    header = struct.unpack(f"<{n_header}q", cur.take(8 * n_header))
    (n_arrays,) = struct.unpack("<B", cur.take(1))
    arrays = []
    for _ in range(n_arrays):
        code, count = struct.unpack("<BQ", cur.take(9))
        dtype = _DTYPES.get(code)
        if dtype is None:
            raise MalformedHeaderError(f"unknown array dtype code {code}")
        raw = cur.take(int(count) * dtype.itemsize)
        arrays.append(np.frombuffer(raw, dtype=dtype).copy())
    (stored_crc,) = struct.unpack("<I", cur.take(4))
    actual = zlib.crc32(data[:cur.pos - 4])
    if stored_crc != actual:
        raise ChecksumError(f"crc mismatch: stored {stored_crc:#010x}, computed {actual:#010x}")
    if cur.pos != len(data):
        raise MalformedHeaderError(f"{len(data) - cur.pos} trailing bytes after record")
    return header, arrays
