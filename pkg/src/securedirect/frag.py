"""IP fragment reassembly that refuses ambiguity.

Overlapping fragments are accepted only when they agree byte-for-byte on
the shared range.  Any disagreement (or any other way of making the
datagram's shape ambiguous) is reported as evasion and the buffer is
discarded, so the IDS and the end host can never see different bytes.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Union

from .packet import MAX_DATAGRAM, IpPacket

FragKey = tuple[int, int, int, int]  # (src_ip, dst_ip, protocol, identification)


class BufferLimit(Exception):
    """A source already holds its quota of partial datagrams."""


@dataclass(frozen=True)
class Complete:
    packet: IpPacket


@dataclass(frozen=True)
class Pending:
    pass


@dataclass(frozen=True)
class EvasionDetected:
    reason: str
    # fragments buffered under the key before it was dropped, oldest first,
    # followed by the offending fragment
    fragments: tuple[IpPacket, ...] = ()


AssemblyResult = Union[Complete, Pending, EvasionDetected]


def frag_key(pkt: IpPacket) -> FragKey:
    return (pkt.src_ip, pkt.dst_ip, pkt.protocol, pkt.identification)


@dataclass
class FragmentBuffer:
    key: FragKey
    first_seen: float
    pieces: list[tuple[int, bytes]] = field(default_factory=list)  # (byte offset, data)
    fragments: list[IpPacket] = field(default_factory=list)
    total_length: int | None = None
    head: IpPacket | None = None  # the offset-0 fragment

    def conflict(self, start: int, data: bytes) -> str | None:
        end = start + len(data)
        if self.total_length is not None and end > self.total_length:
            return "fragment beyond datagram end"
        for other_start, other in self.pieces:
            lo = max(start, other_start)
            hi = min(end, other_start + len(other))
            if lo < hi and data[lo - start:hi - start] != other[lo - other_start:hi - other_start]:
                return "conflicting overlap"
        return None

    def covered(self) -> bool:
        if self.total_length is None or self.head is None:
            return False
        reach = 0
        for start, data in sorted(self.pieces):
            if start > reach:
                return False
            reach = max(reach, start + len(data))
        return reach >= self.total_length

    def assemble(self) -> bytes:
        assert self.total_length is not None
        flat = bytearray(self.total_length)
        for start, data in self.pieces:
            flat[start:start + len(data)] = data
        return bytes(flat)


class FragmentAssembler:
    """Single-owner reassembly state keyed by (src, dst, protocol, id)."""

    def __init__(self, reassembly_timeout: float = 30.0, per_source_quota: int = 64):
        if reassembly_timeout <= 0 or per_source_quota < 1:
            raise ValueError("timeout must be positive and quota at least 1")
        self.reassembly_timeout = reassembly_timeout
        self.per_source_quota = per_source_quota
        self._buffers: dict[FragKey, FragmentBuffer] = {}
        self._per_source: defaultdict[int, int] = defaultdict(int)

    def __len__(self) -> int:
        return len(self._buffers)

    def __contains__(self, key: FragKey) -> bool:
        return key in self._buffers

    def buffers(self) -> dict[FragKey, FragmentBuffer]:
        return dict(self._buffers)

    def offer(self, frag: IpPacket, now: float) -> AssemblyResult:
        if not frag.is_fragment:
            return Complete(frag)
        key = frag_key(frag)
        buf = self._buffers.get(key)
        if buf is None:
            if self._per_source[frag.src_ip] >= self.per_source_quota:
                raise BufferLimit(f"source {frag.src_ip:#010x} holds {self.per_source_quota} buffers")
            buf = FragmentBuffer(key, now)
            self._buffers[key] = buf
            self._per_source[frag.src_ip] += 1

        start = frag.fragment_offset * 8
        end = start + len(frag.payload)
        reason = None
        if frag.more_fragments and len(frag.payload) % 8:
            reason = "non-final fragment not a multiple of 8 bytes"
        elif end > MAX_DATAGRAM:
            reason = "fragment beyond maximum datagram size"
        elif not frag.more_fragments and (
            (buf.total_length is not None and buf.total_length != end)
            or any(s + len(d) > end for s, d in buf.pieces)
        ):
            reason = "inconsistent datagram end"
        elif start == 0 and buf.head is not None and _header_fields(buf.head) != _header_fields(frag):
            reason = "conflicting first-fragment headers"
        else:
            reason = buf.conflict(start, frag.payload)
        if reason is not None:
            self._drop(key)
            return EvasionDetected(reason, (*buf.fragments, frag))

        buf.pieces.append((start, frag.payload))
        buf.fragments.append(frag)
        if not frag.more_fragments:
            buf.total_length = end
        if start == 0:
            buf.head = frag
        if not buf.covered():
            return Pending()
        self._drop(key)
        return Complete(replace(buf.head, payload=buf.assemble(), fragment_offset=0, more_fragments=False))

    def sweep(self, now: float) -> list[FragKey]:
        return list(self.evict_expired(now))

    def evict_expired(self, now: float) -> dict[FragKey, list[IpPacket]]:
        """Remove buffers older than the timeout; return their fragments by key."""
        expired = [k for k, b in self._buffers.items() if now - b.first_seen > self.reassembly_timeout]
        evicted = {}
        for key in expired:
            evicted[key] = self._buffers[key].fragments
            self._drop(key)
        return evicted

    def _drop(self, key: FragKey) -> None:
        buf = self._buffers.pop(key, None)
        if buf is None:
            return
        src = key[0]
        self._per_source[src] -= 1
        if self._per_source[src] <= 0:
            del self._per_source[src]


def _header_fields(pkt: IpPacket) -> tuple:
    return (pkt.ttl, pkt.tos, pkt.options, pkt.dont_fragment)
