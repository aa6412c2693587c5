"""Bit-vector helpers shared by the codec, the wire format and database files.

Bit vectors are ``numpy.uint8`` arrays holding 0/1. On the wire and on disk
they are packed eight per byte, most-significant bit first, zero-padded.
"""

from __future__ import annotations

import numpy as np


def as_bits(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.uint8)
    if arr.size and arr.max() > 1:
        raise ValueError("bit vectors may only contain 0 and 1")
    return arr


def pack_bits(bits) -> bytes:
    return np.packbits(as_bits(bits), bitorder="big").tobytes()


def unpack_bits(data: bytes, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("bit count must be non-negative")
    need = (n + 7) // 8
    if len(data) < need:
        raise ValueError(f"need {need} bytes for {n} bits, got {len(data)}")
    buf = np.frombuffer(bytes(data[:need]), dtype=np.uint8)
    return np.unpackbits(buf, count=n, bitorder="big")


def bits_to_int(bits) -> int:
    """Read a bit vector as an unsigned integer, first bit most significant."""
    out = 0
    for b in as_bits(bits).tolist():
        out = (out << 1) | b
    return out


def int_to_bits(value: int, width: int) -> np.ndarray:
    return np.array([(value >> (width - 1 - i)) & 1 for i in range(width)], dtype=np.uint8)


def rows_to_ints(bits: np.ndarray) -> np.ndarray:
    """Vectorised :func:`bits_to_int` over the last axis of a 2-D bit array."""
    bits = np.asarray(bits, dtype=np.int64)
    width = bits.shape[-1]
    weights = 1 << np.arange(width - 1, -1, -1, dtype=np.int64)
    return bits @ weights


def all_vectors(width: int) -> np.ndarray:
    """Every ``width``-bit vector, row ``i`` being the binary expansion of ``i``."""
    idx = np.arange(1 << width, dtype=np.int64)
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    return ((idx[:, None] >> shifts) & 1).astype(np.uint8)
