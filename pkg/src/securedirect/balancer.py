"""Dispatch state machine of the inspecting load balancer.

``Balancer.ingest`` evaluates one client packet in a fixed order:

a. not addressed to VIP:service_port (or not TCP)   -> Drop("not-vip")
b. source already flagged                           -> ForwardToHoneypot, no IDS query
c. fragment                                         -> reassemble; conflicting shape flags the source
d. same sequence number, different payload          -> flag, RST to backend, Drop
e. no payload (handshake / ACK / FIN)               -> ForwardToBackend by affinity
f. payload                                          -> IDS verdict; attack flags, RSTs and deflects
g. any internal failure                             -> Drop, never forward unchecked
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence, Union

from . import packet as pk
from .frag import BufferLimit, Complete, EvasionDetected, FragmentAssembler, Pending
from .ids import IdsUnavailable, Verdict
from .session import (
    DUPLICATE_SEQ,
    FRAG_EVASION,
    AttackerRegistry,
    ClockError,
    Consistency,
    SessionState,
    SessionTable,
    TableFull,
    note_forwarded,
    record_segment,
    signature_match,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class NoHealthyBackend(Exception):
    pass


# -- configuration -----------------------------------------------------------


def _split_hostport(text: str, default_port: int | None = None) -> tuple[str, int | None]:
    host, sep, port = text.strip().rpartition(":")
    if not sep:
        return text.strip(), default_port
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"bad port in {text!r}") from None


@dataclass(frozen=True)
class BalancerConfig:
    vip: str
    service_port: int
    backends: tuple[str, ...]
    honeypot: str
    ids_endpoint: str = "127.0.0.1:9999"
    ids_timeout_ms: int = 1000
    session_timeout_s: float = 240.0
    probe_interval_s: float = 5.0
    failure_threshold: int = 3
    attacker_ttl_s: float | None = None
    signatures: str | None = None

    def __post_init__(self) -> None:
        if not self.vip or not self.honeypot:
            raise ConfigError("vip and honeypot are required")
        try:
            pk.ip_to_int(self.vip)
        except ValueError:
            raise ConfigError(f"vip must be an IPv4 address, got {self.vip!r}") from None
        if not 0 < self.service_port < 65536:
            raise ConfigError(f"service_port out of range: {self.service_port}")
        if not self.backends:
            raise ConfigError("at least one backend is required")
        if self.failure_threshold < 1:
            raise ConfigError("failure_threshold must be at least 1")
        if self.ids_timeout_ms < 1 or self.session_timeout_s <= 0 or self.probe_interval_s <= 0:
            raise ConfigError("timeouts and intervals must be positive")
        if self.attacker_ttl_s is not None and self.attacker_ttl_s <= 0:
            raise ConfigError("attacker_ttl_s must be positive")

    @property
    def vip_int(self) -> int:
        return pk.ip_to_int(self.vip)

    @property
    def ids_timeout(self) -> float:
        return self.ids_timeout_ms / 1000.0

    def backend_addresses(self) -> list[tuple[str, int]]:
        return [_split_hostport(b, self.service_port) for b in self.backends]  # type: ignore[misc]

    def honeypot_address(self) -> tuple[str, int]:
        return _split_hostport(self.honeypot, self.service_port)  # type: ignore[return-value]

    def ids_address(self) -> tuple[str, int]:
        host, port = _split_hostport(self.ids_endpoint)
        if port is None:
            raise ConfigError(f"ids_endpoint needs host:port, got {self.ids_endpoint!r}")
        return host, port

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                value = ",".join(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_INT_KEYS = {"service_port", "ids_timeout_ms", "failure_threshold"}
_FLOAT_KEYS = {"session_timeout_s", "probe_interval_s", "attacker_ttl_s"}


def parse_config(text: str, base_dir: Path | None = None) -> BalancerConfig:
    known = {f.name for f in fields(BalancerConfig)}
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (p.strip() for p in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: {key!r} given twice")
        try:
            if key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key == "backends":
                values[key] = tuple(v.strip() for v in value.split(",") if v.strip())
            else:
                values[key] = value
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
    if base_dir is not None and "signatures" in values:
        sig = Path(str(values["signatures"]))
        if not sig.is_absolute():
            values["signatures"] = str(base_dir / sig)
    missing = {"vip", "service_port", "backends", "honeypot"} - values.keys()
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(sorted(missing))}")
    try:
        return BalancerConfig(**values)  # type: ignore[arg-type]
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> BalancerConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(text, path.parent)


# -- backend pool ------------------------------------------------------------


@dataclass
class Backend:
    id: str
    address: str
    healthy: bool = True
    consecutive_failures: int = 0


@dataclass(frozen=True)
class HealthChange:
    went_down: tuple[str, ...] = ()
    came_up: tuple[str, ...] = ()


class BackendPool:
    def __init__(self, addresses: Sequence[str], failure_threshold: int = 3):
        if failure_threshold < 1:
            raise ValueError("failure_threshold must be at least 1")
        self.backends = [Backend(f"b{i}", a) for i, a in enumerate(addresses)]
        self.failure_threshold = failure_threshold
        self.cursor = 0
        self._by_id = {b.id: b for b in self.backends}

    def __getitem__(self, backend_id: str) -> Backend:
        return self._by_id[backend_id]

    def ids(self) -> list[str]:
        return [b.id for b in self.backends]

    def healthy_ids(self) -> list[str]:
        return [b.id for b in self.backends if b.healthy]

    def select(self) -> str:
        n = len(self.backends)
        for step in range(n):
            index = (self.cursor + step) % n
            if self.backends[index].healthy:
                self.cursor = (index + 1) % n
                return self.backends[index].id
        raise NoHealthyBackend("no healthy backend in pool")

    def health_tick(self, results: Mapping[str, bool] | Sequence[bool]) -> HealthChange:
        if not isinstance(results, Mapping):
            if len(results) != len(self.backends):
                raise ValueError(f"expected {len(self.backends)} probe results, got {len(results)}")
            results = dict(zip(self.ids(), results))
        if set(results) != set(self._by_id):
            raise ValueError("probe results must cover every backend exactly once")
        down, up = [], []
        for backend in self.backends:
            if results[backend.id]:
                if not backend.healthy:
                    up.append(backend.id)
                backend.healthy = True
                backend.consecutive_failures = 0
            else:
                backend.consecutive_failures += 1
                if backend.healthy and backend.consecutive_failures >= self.failure_threshold:
                    backend.healthy = False
                    down.append(backend.id)
        return HealthChange(tuple(down), tuple(up))


def select_backend(pool: BackendPool) -> str:
    return pool.select()


def health_tick(pool: BackendPool, probe_results, now: float | None = None) -> HealthChange:
    return pool.health_tick(probe_results)


# -- actions -----------------------------------------------------------------


@dataclass(frozen=True)
class ForwardToBackend:
    backend: str
    packet: pk.IpPacket


@dataclass(frozen=True)
class ForwardToHoneypot:
    packet: pk.IpPacket


@dataclass(frozen=True)
class EmitRst:
    backend: str
    packet: pk.IpPacket


@dataclass(frozen=True)
class Drop:
    reason: str
    packet: pk.IpPacket | None = field(default=None, compare=False)


Action = Union[ForwardToBackend, ForwardToHoneypot, EmitRst, Drop]

VerdictSource = Callable[[bytes], Verdict]


@dataclass
class Stats:
    ids_queries: Counter = field(default_factory=Counter)  # by source address
    query_log: list[tuple[int, float, int]] = field(default_factory=list)  # (packet no, time, source)
    flagged_at_packet: dict[int, int] = field(default_factory=dict)
    packets: int = 0
    actions: Counter = field(default_factory=Counter)


class Balancer:
    """Single-owner event-loop core.  Feed it packets, ticks and probe results in time order."""

    def __init__(
        self,
        config: BalancerConfig,
        ids: VerdictSource,
        *,
        reassembly_timeout: float = 30.0,
        fragment_quota: int = 64,
        table_capacity: int = 65536,
        max_tracked_segments: int = 256,
    ):
        self.config = config
        self.ids = ids
        self.vip = config.vip_int
        self.pool = BackendPool(config.backends, config.failure_threshold)
        self.sessions = SessionTable(config.session_timeout_s, table_capacity, max_tracked_segments)
        self.fragments = FragmentAssembler(reassembly_timeout, fragment_quota)
        self.attackers = AttackerRegistry(config.attacker_ttl_s)
        self.stats = Stats()
        self._next_probe: float | None = None
        self._last_now = float("-inf")

    # packets ---------------------------------------------------------------

    def ingest(self, pkt: pk.IpPacket, now: float) -> list[Action]:
        self._advance(now)
        self.stats.packets += 1
        actions = self._ingest(pkt, now)
        for action in actions:
            self.stats.actions[type(action).__name__] += 1
        return actions

    def _ingest(self, pkt: pk.IpPacket, now: float) -> list[Action]:
        if pkt.dst_ip != self.vip or pkt.protocol != pk.PROTO_TCP:
            return [Drop("not-vip", pkt)]
        if not pkt.is_fragment:
            try:
                seg = pk.parse_tcp(pkt)
            except pk.PacketError:
                return [Drop("malformed", pkt)]
            if seg.dst_port != self.config.service_port:
                return [Drop("not-vip", pkt)]

        if self.attackers.is_flagged(pkt.src_ip, now):
            return [ForwardToHoneypot(pkt)]

        if pkt.is_fragment:
            try:
                result = self.fragments.offer(pkt, now)
            except BufferLimit:
                return [Drop("frag-buffer-limit", pkt)]
            if isinstance(result, Pending):
                return []
            if isinstance(result, EvasionDetected):
                log.info("fragment evasion from %s: %s", pk.int_to_ip(pkt.src_ip), result.reason)
                self._flag(pkt.src_ip, FRAG_EVASION, now)
                return [ForwardToHoneypot(f) for f in result.fragments]
            assert isinstance(result, Complete)
            pkt = result.packet
            try:
                seg = pk.parse_tcp(pkt)
            except pk.PacketError:
                return [Drop("malformed", pkt)]
            if seg.dst_port != self.config.service_port:
                return [Drop("not-vip", pkt)]

        if not pk.verify_checksum(seg, pkt.src_ip, pkt.dst_ip):
            return [Drop("bad-checksum", pkt)]

        key = pk.five_tuple(pkt, seg)
        entry = self.sessions.get(key, now)
        if entry is not None:
            if entry.state is SessionState.RESET_SENT:
                return [Drop("session-reset", pkt)]
            if record_segment(entry, seg) is Consistency.INCONSISTENT:
                log.info("duplicate sequence %d with new content on %s", seg.seq, key)
                self._flag(pkt.src_ip, DUPLICATE_SEQ, now)
                return [*self._reset(entry), Drop("duplicate-seq", pkt)]

        if seg.payload:
            try:
                verdict = self._query(pkt.src_ip, seg.payload, now)
            except IdsUnavailable as exc:
                log.warning("IDS unavailable, dropping: %s", exc)
                return [Drop("ids-unavailable", pkt)]
            if verdict.attack:
                log.info("signature %s from %s", verdict.matched, pk.int_to_ip(pkt.src_ip))
                self._flag(pkt.src_ip, signature_match(verdict.matched), now)
                resets = self._reset(entry) if entry is not None else []
                return [*resets, ForwardToHoneypot(pkt)]

        if entry is None:
            try:
                entry = self.sessions.lookup_or_admit(key, now, self.pool.select)
            except TableFull:
                return [Drop("table-full", pkt)]
            except NoHealthyBackend:
                return [Drop("no-backend", pkt)]
            record_segment(entry, seg)
        note_forwarded(entry, seg)
        return [ForwardToBackend(entry.backend, pkt)]

    def _query(self, src: int, payload: bytes, now: float) -> Verdict:
        self.stats.ids_queries[src] += 1
        self.stats.query_log.append((self.stats.packets, now, src))
        return self.ids(payload)

    def _flag(self, src: int, reason, now: float) -> None:
        self.attackers.flag(src, reason, now)
        self.stats.flagged_at_packet.setdefault(src, self.stats.packets)

    def _reset(self, entry) -> list[Action]:
        entry.state = SessionState.RESET_SENT
        try:
            return [EmitRst(entry.backend, pk.make_rst(entry))]
        except pk.NoState:
            return []

    # time ------------------------------------------------------------------

    def _advance(self, now: float) -> None:
        if now < self._last_now:
            raise ClockError(f"time went backwards: {now} < {self._last_now}")
        self._last_now = now

    def tick(self, now: float) -> list[Action]:
        """Expire idle sessions, stale fragment buffers and (if configured) attacker records.

        Fragments discarded by the sweep come back as ``Drop("frag-timeout")``.
        """
        self._advance(now)
        expired = self.sessions.expire(now)
        if expired:
            log.debug("expired %d sessions", len(expired))
        actions: list[Action] = []
        for frags in self.fragments.evict_expired(now).values():
            actions.extend(Drop("frag-timeout", f) for f in frags)
        if self.attackers.ttl is not None:
            self.attackers.expire(now)
        for action in actions:
            self.stats.actions[type(action).__name__] += 1
        return actions

    def probes_due(self, now: float) -> list[str]:
        """Backends to probe at ``now``: all of them once per probe interval."""
        if self._next_probe is None or now >= self._next_probe:
            self._next_probe = now + self.config.probe_interval_s
            return self.pool.ids()
        return []

    def health_tick(self, probe_results, now: float) -> HealthChange:
        self._advance(now)
        change = self.pool.health_tick(probe_results)
        for backend_id in change.went_down:
            log.warning("backend %s removed from pool", backend_id)
        for backend_id in change.came_up:
            log.info("backend %s restored to pool", backend_id)
        return change

    def queries_after_flag(self, src: int) -> int:
        """IDS queries for ``src`` made after the packet that first flagged it."""
        flagged = self.stats.flagged_at_packet.get(src)
        if flagged is None:
            return 0
        return sum(1 for n, _, s in self.stats.query_log if s == src and n > flagged)

