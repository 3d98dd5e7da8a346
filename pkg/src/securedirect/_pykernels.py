"""Pure-Python twins of the compiled kernels in ``_ckernels.pyx``."""

from __future__ import annotations

import struct
from typing import Sequence

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def ones_complement_sum(data: bytes, initial: int = 0) -> int:
    """Unfolded 16-bit big-endian word sum of ``data`` (odd tail zero-padded)."""
    if len(data) % 2:
        data = bytes(data) + b"\x00"
    total = initial + sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def dfa_scan(
    delta: Sequence[int],
    out_start: Sequence[int],
    out_ids: Sequence[int],
    n_patterns: int,
    data: bytes,
) -> list[int]:
    if n_patterns == 0:
        return []
    seen: set[int] = set()
    state = 0
    for b in data:
        state = delta[(state << 8) | b]
        lo, hi = out_start[state], out_start[state + 1]
        if lo != hi:
            seen.update(out_ids[lo:hi])
            if len(seen) == n_patterns:
                break
    return sorted(seen)
