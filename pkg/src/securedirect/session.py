"""Connection table, duplicate-sequence check and attacker registry."""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, TextIO

from .kernels import fnv1a64
from .packet import FiveTuple, TcpFlag, TcpSegment, int_to_ip, ip_to_int

DEFAULT_SESSION_TIMEOUT = 240.0
DEFAULT_MAX_TRACKED_SEGMENTS = 256
DEFAULT_CAPACITY = 65536


class TableFull(Exception):
    pass


class ClockError(RuntimeError):
    """A timestamp earlier than one already observed was supplied."""


class SessionState(enum.Enum):
    ACTIVE = "active"
    RESET_SENT = "reset-sent"


class Consistency(enum.Enum):
    FRESH = "fresh"
    EXACT_RETRANSMIT = "exact-retransmit"
    INCONSISTENT = "inconsistent"


def _seq_after(a: int, b: int) -> bool:
    """True when sequence number ``a`` is later than ``b`` (mod 2**32)."""
    return 0 < ((a - b) & 0xFFFFFFFF) < 0x80000000


def payload_digest(payload: bytes) -> tuple[int, int]:
    return len(payload), fnv1a64(payload)


@dataclass
class SessionEntry:
    key: FiveTuple
    backend: str
    last_seen: float
    created: float = 0.0
    seq_digests: OrderedDict[int, tuple[int, int]] = field(default_factory=OrderedDict)
    state: SessionState = SessionState.ACTIVE
    next_seq: int | None = None
    max_tracked_segments: int = DEFAULT_MAX_TRACKED_SEGMENTS

    def touch(self, now: float) -> None:
        if now > self.last_seen:
            self.last_seen = now


def record_segment(entry: SessionEntry, seg: TcpSegment) -> Consistency:
    """Compare ``seg`` against what this connection already sent at ``seg.seq``.

    Only checksum-valid segments may be passed in.  Payload-free segments
    are not tracked: a pure ACK legitimately shares its sequence number
    with the data segment that follows it.
    """
    if not seg.payload:
        return Consistency.FRESH
    digest = payload_digest(seg.payload)
    seen = entry.seq_digests.get(seg.seq)
    if seen is None:
        entry.seq_digests[seg.seq] = digest
        while len(entry.seq_digests) > entry.max_tracked_segments:
            entry.seq_digests.popitem(last=False)
        return Consistency.FRESH
    if seen == digest:
        return Consistency.EXACT_RETRANSMIT
    return Consistency.INCONSISTENT


def note_forwarded(entry: SessionEntry, seg: TcpSegment) -> None:
    """Advance the reset anchor past a segment the backend was given."""
    advance = len(seg.payload) + seg.has(TcpFlag.SYN) + seg.has(TcpFlag.FIN)
    end = (seg.seq + advance) & 0xFFFFFFFF
    if entry.next_seq is None or _seq_after(end, entry.next_seq):
        entry.next_seq = end


class _Clock:
    def __init__(self) -> None:
        self.last = float("-inf")

    def advance(self, now: float) -> None:
        if now < self.last:
            raise ClockError(f"time went backwards: {now} < {self.last}")
        self.last = now


class SessionTable:
    """Five-tuple keyed connection table with idle expiry."""

    def __init__(
        self,
        session_timeout: float = DEFAULT_SESSION_TIMEOUT,
        capacity: int = DEFAULT_CAPACITY,
        max_tracked_segments: int = DEFAULT_MAX_TRACKED_SEGMENTS,
    ):
        if session_timeout <= 0 or capacity < 1 or max_tracked_segments < 1:
            raise ValueError("timeout, capacity and segment window must be positive")
        self.session_timeout = session_timeout
        self.capacity = capacity
        self.max_tracked_segments = max_tracked_segments
        self._entries: dict[FiveTuple, SessionEntry] = {}
        self._clock = _Clock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: FiveTuple) -> bool:
        return key in self._entries

    def entries(self) -> list[SessionEntry]:
        return list(self._entries.values())

    def get(self, key: FiveTuple, now: float) -> SessionEntry | None:
        """Return the live entry for ``key`` and refresh its timestamp."""
        self._clock.advance(now)
        entry = self._entries.get(key)
        if entry is not None:
            entry.touch(now)
        return entry

    def lookup_or_admit(self, key: FiveTuple, now: float, assign: Callable[[], str]) -> SessionEntry:
        entry = self.get(key, now)
        if entry is not None:
            return entry
        if len(self._entries) >= self.capacity:
            raise TableFull(f"{self.capacity} sessions")
        entry = SessionEntry(
            key=key,
            backend=assign(),
            last_seen=now,
            created=now,
            max_tracked_segments=self.max_tracked_segments,
        )
        self._entries[key] = entry
        return entry

    def remove(self, key: FiveTuple) -> None:
        self._entries.pop(key, None)

    def expire(self, now: float) -> list[FiveTuple]:
        self._clock.advance(now)
        gone = [k for k, e in self._entries.items() if now - e.last_seen > self.session_timeout]
        for key in gone:
            del self._entries[key]
        return gone


class Reason(enum.Enum):
    SIGNATURE = "signature"
    DUPLICATE_SEQ = "duplicate-seq"
    FRAG_EVASION = "frag-evasion"


@dataclass(frozen=True)
class FlagReason:
    kind: Reason
    signature_ids: tuple[int, ...] = ()

    def __str__(self) -> str:
        if self.kind is Reason.SIGNATURE:
            return f"signature:{','.join(map(str, self.signature_ids))}"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> FlagReason:
        if text.startswith("signature:"):
            ids = tuple(int(x) for x in text.split(":", 1)[1].split(",") if x)
            return cls(Reason.SIGNATURE, ids)
        return cls(Reason(text))


def signature_match(ids: Iterable[int]) -> FlagReason:
    return FlagReason(Reason.SIGNATURE, tuple(ids))


DUPLICATE_SEQ = FlagReason(Reason.DUPLICATE_SEQ)
FRAG_EVASION = FlagReason(Reason.FRAG_EVASION)


@dataclass(frozen=True)
class AttackerRecord:
    ip: int
    reason: FlagReason
    flagged_at: float

    def to_line(self) -> str:
        return f"{int_to_ip(self.ip)} {self.reason} {self.flagged_at:g}"


class AttackerRegistry:
    """Flagged source addresses.  Records never expire unless ``ttl`` is set."""

    def __init__(self, ttl: float | None = None):
        if ttl is not None and ttl <= 0:
            raise ValueError("ttl must be positive")
        self.ttl = ttl
        self._records: dict[int, AttackerRecord] = {}

    def __len__(self) -> int:
        return len(self._records)

    def flag(self, ip: int, reason: FlagReason, now: float) -> AttackerRecord:
        record = self._records.get(ip)
        if record is not None and self._live(record, now):
            return record
        record = AttackerRecord(ip, reason, now)
        self._records[ip] = record
        return record

    def is_flagged(self, ip: int, now: float) -> bool:
        record = self._records.get(ip)
        return record is not None and self._live(record, now)

    def get(self, ip: int) -> AttackerRecord | None:
        return self._records.get(ip)

    def expire(self, now: float) -> list[int]:
        gone = [ip for ip, r in self._records.items() if not self._live(r, now)]
        for ip in gone:
            del self._records[ip]
        return gone

    def _live(self, record: AttackerRecord, now: float) -> bool:
        return self.ttl is None or now - record.flagged_at <= self.ttl

    def snapshot(self) -> tuple[AttackerRecord, ...]:
        return tuple(sorted(self._records.values(), key=lambda r: (r.flagged_at, r.ip)))

    def export(self, sink: TextIO) -> int:
        records = self.snapshot()
        for record in records:
            sink.write(record.to_line() + "\n")
        return len(records)


def read_attacker_report(source: TextIO) -> list[AttackerRecord]:
    records = []
    for line in source:
        line = line.strip()
        if not line:
            continue
        ip, reason, at = line.split()
        records.append(AttackerRecord(ip_to_int(ip), FlagReason.parse(reason), float(at)))
    return records
