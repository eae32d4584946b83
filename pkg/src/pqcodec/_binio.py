"""Small helpers for the versioned binary artifact formats."""

from __future__ import annotations

import hashlib
import zlib

import numpy as np

from .errors import CorruptDataError


def u64_digest(payload: bytes) -> int:
    """64-bit identity of a parameter payload (first 8 bytes of SHA-256, LE)."""
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def crc32(payload: bytes) -> int:
    return zlib.crc32(payload) & 0xFFFFFFFF


def f32_bytes(arr: np.ndarray) -> bytes:
    """Array serialized as little-endian 32-bit floats, C order."""
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def read_exact(buf: bytes, offset: int, count: int, what: str) -> bytes:
    if offset + count > len(buf):
        raise CorruptDataError(f"truncated {what}: need {count} bytes at offset {offset}")
    return buf[offset : offset + count]
