# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: internet checksum, payload digest, automaton scan."""

from libc.stdint cimport int32_t, uint8_t, uint32_t, uint64_t
from libc.stdlib cimport calloc, free


def ones_complement_sum(const uint8_t[::1] data, uint32_t initial=0):
    """Unfolded 16-bit big-endian word sum of ``data`` (odd tail zero-padded)."""
    cdef Py_ssize_t n = data.shape[0]
    cdef Py_ssize_t i = 0
    cdef uint64_t total = initial
    with nogil:
        while i + 1 < n:
            total += (<uint32_t>data[i] << 8) | data[i + 1]
            i += 2
        if i < n:
            total += <uint32_t>data[i] << 8
        while total >> 16:
            total = (total & 0xFFFF) + (total >> 16)
    return <uint32_t>total


def fnv1a64(const uint8_t[::1] data):
    cdef uint64_t h = 0xCBF29CE484222325ULL
    cdef Py_ssize_t i
    with nogil:
        for i in range(data.shape[0]):
            h ^= data[i]
            h *= 0x100000001B3ULL
    return h


def dfa_scan(const int32_t[::1] delta, const int32_t[::1] out_start,
             const int32_t[::1] out_ids, int n_patterns, const uint8_t[::1] data):
    """Run the dense automaton over ``data``; return sorted distinct pattern indices."""
    cdef Py_ssize_t i, k
    cdef int32_t state = 0
    cdef int32_t hits = 0
    cdef uint8_t *seen
    if n_patterns == 0:
        return []
    seen = <uint8_t *>calloc(n_patterns, 1)
    if seen == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(data.shape[0]):
                state = delta[(state << 8) | data[i]]
                for k in range(out_start[state], out_start[state + 1]):
                    if not seen[out_ids[k]]:
                        seen[out_ids[k]] = 1
                        hits += 1
                if hits == n_patterns:
                    break
        return [k for k in range(n_patterns) if seen[k]]
    finally:
        free(seen)
