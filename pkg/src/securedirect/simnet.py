"""Deterministic discrete-event simulation of the balancer topology.

Nodes are the balancer, production backends, the honeypot and scripted
clients.  The IDS is modelled as a blocking step inside the balancer with
its own latency, so inspection cost shows up in response times.  Servers
answer clients directly (the balancer only carries client->server
traffic).  Time is an integer number of milliseconds.

Given the same topology, scripts and seed a run produces the same trace,
byte for byte.
"""

from __future__ import annotations

import heapq
import random
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence, Union

from . import packet as pk
from .balancer import (
    Action,
    Balancer,
    BalancerConfig,
    Drop,
    EmitRst,
    ForwardToBackend,
    ForwardToHoneypot,
)
from .frag import frag_key
from .honeypot import CaptureLog, DecoyScript, DEFAULT_SCRIPT, DEFAULT_OUTBOUND_BUDGET, Honeypot
from .ids import ConnectFailed, SignatureDb, Verdict, default_signatures
from .session import AttackerRecord

BALANCER = "balancer"
HONEYPOT = "honeypot"


class ScheduleOverflow(RuntimeError):
    pass


# -- topology ----------------------------------------------------------------


@dataclass(frozen=True)
class Topology:
    """Addresses, link properties and service times.

    The default is the smallest useful testbed: two production servers, a
    honeypot host and the virtual IP, i.e. three servers and four addresses.
    """

    vip: str = "10.0.0.100"
    service_port: int = 80
    backends: tuple[str, ...] = ("10.0.0.1", "10.0.0.2")
    honeypot: str = "10.0.0.3"
    link_latency_ms: int = 1
    latency_overrides: tuple[tuple[str, str, int], ...] = ()  # (from node, to node, ms)
    loss: tuple[tuple[str, str, float], ...] = ()  # (from node, to node, rate)
    ids_latency_ms: int = 2
    ids_enabled: bool = True
    balancer_proc_ms: int = 0
    backend_service_ms: int = 5
    page_bytes: int = 1024
    tick_interval_ms: int = 1000
    probe_rtt_ms: int = 2
    backend_down: tuple[tuple[str, int, int], ...] = ()  # (backend id, from ms, until ms)
    session_timeout_s: float = 240.0
    probe_interval_s: float = 5.0
    failure_threshold: int = 3
    attacker_ttl_s: float | None = None
    decoy: DecoyScript = DEFAULT_SCRIPT
    outbound_budget: int = DEFAULT_OUTBOUND_BUDGET

    def __post_init__(self) -> None:
        if len(self.backends) < 2:
            raise ValueError("topology needs at least two production backends")
        addresses = {self.vip, self.honeypot, *self.backends}
        if len(addresses) != len(self.backends) + 2:
            raise ValueError("vip, honeypot and backends must use distinct addresses")
        if min(self.link_latency_ms, self.ids_latency_ms, self.balancer_proc_ms, self.backend_service_ms) < 0:
            raise ValueError("latencies must be non-negative")

    def config(self) -> BalancerConfig:
        return BalancerConfig(
            vip=self.vip,
            service_port=self.service_port,
            backends=self.backends,
            honeypot=self.honeypot,
            session_timeout_s=self.session_timeout_s,
            probe_interval_s=self.probe_interval_s,
            failure_threshold=self.failure_threshold,
            attacker_ttl_s=self.attacker_ttl_s,
        )

    @classmethod
    def from_config(cls, config: BalancerConfig, **overrides) -> Topology:
        return cls(
            vip=config.vip,
            service_port=config.service_port,
            backends=tuple(h for h, _ in config.backend_addresses()),
            honeypot=config.honeypot_address()[0],
            session_timeout_s=config.session_timeout_s,
            probe_interval_s=config.probe_interval_s,
            failure_threshold=config.failure_threshold,
            attacker_ttl_s=config.attacker_ttl_s,
            **overrides,
        )

    def latency(self, src: str, dst: str) -> int:
        for a, b, ms in self.latency_overrides:
            if a == src and b == dst:
                return ms
        return self.link_latency_ms

    def loss_rate(self, src: str, dst: str) -> float:
        for a, b, rate in self.loss:
            if a == src and b == dst:
                return rate
        return 0.0

    def is_down(self, backend: str, at_ms: int) -> bool:
        return any(b == backend and lo <= at_ms < hi for b, lo, hi in self.backend_down)


# -- traffic scripts ---------------------------------------------------------


@dataclass(frozen=True)
class BenignRequest:
    request: bytes
    start_ms: int = 0
    think_ms: int = 0
    fragment_cuts: tuple[int, ...] = ()  # split the request datagram at these payload offsets


@dataclass(frozen=True)
class ExploitDirect:
    payload: bytes
    start_ms: int = 0


@dataclass(frozen=True)
class DuplicateSeqEvasion:
    """Two segments at the same sequence number: ``benign`` first, then ``attack``."""

    benign: bytes
    attack: bytes
    start_ms: int = 0
    gap_ms: int = 1


@dataclass(frozen=True)
class FragEvasion:
    """Send the request segment as hand-made fragments.

    ``plan`` lists ``(start, end, alt)`` byte ranges of the TCP segment, in
    send order; ranges with ``alt`` set are cut from the segment built around
    ``alt_payload`` instead of ``payload``.
    """

    payload: bytes
    plan: tuple[tuple[int, int, bool], ...]
    alt_payload: bytes = b""
    start_ms: int = 0


@dataclass(frozen=True)
class Reconnect:
    """Exploit, wait out the silence, reconnect and keep talking."""

    exploit: bytes
    followups: tuple[bytes, ...] = ()
    silence_ms: int = 50
    start_ms: int = 0
    followup_gap_ms: int = 5


TrafficScript = Union[BenignRequest, ExploitDirect, DuplicateSeqEvasion, FragEvasion, Reconnect]


def is_benign(script: TrafficScript) -> bool:
    return isinstance(script, BenignRequest)


# -- trace -------------------------------------------------------------------


@dataclass(order=True)
class SimEvent:
    at: int
    seq: int
    kind: str = field(compare=False)
    handler: Callable[[], None] = field(compare=False, repr=False)


@dataclass(frozen=True)
class Completion:
    request_id: int
    client: int
    port: int
    start_ms: int
    end_ms: int
    server: str

    @property
    def latency_ms(self) -> int:
        return self.end_ms - self.start_ms


@dataclass
class SimTrace:
    """Everything observable about one run.

    ``events`` holds ``(at_ms, kind, detail)`` tuples in processing order;
    :meth:`export` renders them one per line.
    """

    seed: int
    until: int
    events: list[tuple[int, str, str]] = field(default_factory=list)
    actions: list[tuple[int, int, Action]] = field(default_factory=list)  # (at, input pid, action)
    completions: list[Completion] = field(default_factory=list)
    attackers: tuple[AttackerRecord, ...] = ()
    captures: CaptureLog = field(default_factory=CaptureLog)
    backend_streams: dict[str, dict[pk.FiveTuple, bytes]] = field(default_factory=dict)
    backend_segments: dict[str, list[bytes]] = field(default_factory=dict)
    rst: list[tuple[int, str, pk.FiveTuple, bool]] = field(default_factory=list)  # (at, backend, conn, accepted)
    ids_queries: Counter = field(default_factory=Counter)
    queries_after_flag: dict[int, int] = field(default_factory=dict)
    disposition: dict[int, str] = field(default_factory=dict)  # injected pid -> outcome
    injected: list[int] = field(default_factory=list)
    sent_by_client: dict[int, list[tuple[int, int, bytes]]] = field(default_factory=dict)  # ip -> [(ingest order, pid, payload)]
    ingest_order: dict[int, int] = field(default_factory=dict)  # pid -> position in balancer processing
    flag_pid: dict[int, int] = field(default_factory=dict)  # source -> pid of the packet that flagged it
    synack_from: dict[tuple[int, int], str] = field(default_factory=dict)  # (client ip, port) -> node
    event_count: int = 0

    def log(self, at: int, kind: str, detail: str) -> None:
        self.events.append((at, kind, detail))

    def export(self) -> str:
        return "".join(f"{at} {kind} {detail}\n" for at, kind, detail in self.events)

    def backend_log(self, backend: str) -> bytes:
        return b"".join(self.backend_streams.get(backend, {}).values())

    def production_bytes(self) -> list[bytes]:
        """Per-connection byte streams delivered to production backends."""
        return [s for streams in self.backend_streams.values() for s in streams.values()]

    def flagged(self) -> dict[int, AttackerRecord]:
        return {r.ip: r for r in self.attackers}

    def conservation(self) -> Counter:
        return Counter(self.disposition[p] for p in self.injected)

    def post_detection_bytes(self, ip: int) -> bytes:
        """Payload bytes ``ip`` sent from its flagging packet onward, in processing order."""
        pid = self.flag_pid.get(ip)
        if pid is None:
            return b""
        start = self.ingest_order[pid]
        sent = [(order, data) for order, _, data in self.sent_by_client.get(ip, []) if order >= start]
        return b"".join(data for _, data in sorted(sent))


# -- nodes -------------------------------------------------------------------


class _SimIds:
    def __init__(self, db: SignatureDb, enabled: bool):
        self.db = db
        self.enabled = enabled

    def __call__(self, payload: bytes) -> Verdict:
        if not self.enabled:
            raise ConnectFailed("IDS node disabled")
        return self.db.inspect(payload)


@dataclass
class _BackendConn:
    rcv_nxt: int
    snd_nxt: int
    open: bool = True


class _Backend:
    def __init__(self, sim: Simulator, backend_id: str, address: str):
        self.sim = sim
        self.id = backend_id
        self.address = pk.ip_to_int(address)
        self.conns: dict[pk.FiveTuple, _BackendConn] = {}
        self.streams: dict[pk.FiveTuple, bytearray] = {}
        self.segments: list[bytes] = []
        self.free_at = 0

    def receive(self, pkt: pk.IpPacket, src_node: str) -> None:
        sim = self.sim
        if sim.topology.is_down(self.id, sim.now):
            sim.trace.log(sim.now, "lost", f"node={self.id} reason=backend-down")
            return
        try:
            seg = pk.parse_tcp(pkt)
        except pk.PacketError:
            return
        key = pk.five_tuple(pkt, seg)
        conn = self.conns.get(key)
        if seg.has(pk.TcpFlag.RST):
            accepted = conn is not None and conn.open and seg.seq == conn.rcv_nxt
            if accepted:
                conn.open = False
            sim.trace.rst.append((sim.now, self.id, key, accepted))
            sim.trace.log(sim.now, "rst", f"node={self.id} conn={key} accepted={int(accepted)}")
            return
        if seg.has(pk.TcpFlag.SYN):
            if conn is None or not conn.open:
                isn = sim.rng.getrandbits(32)
                conn = _BackendConn(rcv_nxt=(seg.seq + 1) & 0xFFFFFFFF, snd_nxt=(isn + 1) & 0xFFFFFFFF)
                self.conns[key] = conn
                self.streams[key] = bytearray()
                reply = pk.TcpSegment(seg.dst_port, seg.src_port, isn, conn.rcv_nxt, pk.TcpFlag.SYN | pk.TcpFlag.ACK)
                sim.send(self.id, _client_node(pkt.src_ip), pk.tcp_packet(pkt.dst_ip, pkt.src_ip, reply))
            return
        if conn is None or not conn.open:
            return
        if seg.payload and seg.seq == conn.rcv_nxt:
            conn.rcv_nxt = (conn.rcv_nxt + len(seg.payload)) & 0xFFFFFFFF
            self.streams[key] += seg.payload
            self.segments.append(seg.payload)
            start = max(sim.now, self.free_at)
            self.free_at = start + sim.topology.backend_service_ms
            sim.at(self.free_at, "serve", lambda: self._respond(key, pkt.dst_ip, pkt.src_ip))
        if seg.has(pk.TcpFlag.FIN):
            conn.open = False

    def _respond(self, key: pk.FiveTuple, vip: int, client: int) -> None:
        conn = self.conns[key]
        page = bytes(self.sim.topology.page_bytes)
        seg = pk.TcpSegment(key.dst_port, key.src_port, conn.snd_nxt, conn.rcv_nxt, pk.TcpFlag.PSH | pk.TcpFlag.ACK, payload=page)
        conn.snd_nxt = (conn.snd_nxt + len(page)) & 0xFFFFFFFF
        self.sim.send(self.id, _client_node(client), pk.tcp_packet(vip, client, seg))


def _client_node(ip: int) -> str:
    return f"client:{pk.int_to_ip(ip)}"


class _Agent:
    """Client-side behaviour of one traffic script."""

    def __init__(self, sim: Simulator, client: _Client, script: TrafficScript, index: int):
        self.sim = sim
        self.client = client
        self.script = script
        self.index = index
        self.port = 0
        self.isn = 0
        self.snd_nxt = 0
        self.rcv_nxt = 0
        self.started = 0
        self.done = False

    # helpers
    def open(self) -> None:
        self.port = self.client.allocate_port(self)
        self.isn = self.sim.rng.getrandbits(32)
        self.snd_nxt = (self.isn + 1) & 0xFFFFFFFF
        self.started = self.sim.now
        self.emit(pk.TcpSegment(self.port, self.sim.topology.service_port, self.isn, 0, pk.TcpFlag.SYN))

    def segment(self, payload: bytes = b"", flags: pk.TcpFlag = pk.TcpFlag.ACK, seq: int | None = None) -> pk.TcpSegment:
        return pk.TcpSegment(
            self.port,
            self.sim.topology.service_port,
            self.snd_nxt if seq is None else seq,
            self.rcv_nxt,
            flags,
            payload=payload,
        )

    def emit(self, seg: pk.TcpSegment) -> None:
        self.client.send(pk.tcp_packet(self.client.ip, self.sim.vip, seg))

    def send_data(self, payload: bytes, cuts: tuple[int, ...] = ()) -> None:
        seg = self.segment(payload, pk.TcpFlag.PSH | pk.TcpFlag.ACK)
        ip_pkt = pk.tcp_packet(self.client.ip, self.sim.vip, seg, identification=self.client.next_ip_id())
        if cuts:
            for piece in pk.fragment(ip_pkt, list(cuts)):
                self.client.send(piece)
        else:
            self.client.send(ip_pkt)
        self.snd_nxt = (self.snd_nxt + len(payload)) & 0xFFFFFFFF

    # events
    def start(self) -> None:
        self.open()

    def on_packet(self, pkt: pk.IpPacket, seg: pk.TcpSegment, src_node: str) -> None:
        if seg.has(pk.TcpFlag.SYN) and seg.has(pk.TcpFlag.ACK):
            self.rcv_nxt = (seg.seq + 1) & 0xFFFFFFFF
            self.sim.trace.synack_from[(self.client.ip, seg.dst_port)] = src_node
            self.emit(self.segment())
            self.established(src_node)
        elif seg.payload:
            self.rcv_nxt = (seg.seq + len(seg.payload)) & 0xFFFFFFFF
            self.data(seg, src_node)

    def established(self, server: str) -> None:
        pass

    def data(self, seg: pk.TcpSegment, server: str) -> None:
        pass


class _BenignAgent(_Agent):
    script: BenignRequest

    def established(self, server: str) -> None:
        delay = self.script.think_ms
        if delay:
            self.sim.at(self.sim.now + delay, "client", lambda: self.send_data(self.script.request, self.script.fragment_cuts))
        else:
            self.send_data(self.script.request, self.script.fragment_cuts)

    def data(self, seg: pk.TcpSegment, server: str) -> None:
        if self.done:
            return
        self.done = True
        request_id = self.sim.next_request_id()
        self.sim.trace.completions.append(
            Completion(request_id, self.client.ip, self.port, self.started, self.sim.now, server)
        )
        self.sim.trace.log(self.sim.now, "complete", f"request={request_id} client={pk.int_to_ip(self.client.ip)} port={self.port} latency={self.sim.now - self.started} server={server}")
        self.emit(self.segment(flags=pk.TcpFlag.FIN | pk.TcpFlag.ACK))
        self.snd_nxt = (self.snd_nxt + 1) & 0xFFFFFFFF


class _ExploitAgent(_Agent):
    script: ExploitDirect

    def established(self, server: str) -> None:
        self.send_data(self.script.payload)


class _DupSeqAgent(_Agent):
    script: DuplicateSeqEvasion

    def established(self, server: str) -> None:
        seq = self.snd_nxt
        self.send_data(self.script.benign)

        def second() -> None:
            self.emit(self.segment(self.script.attack, pk.TcpFlag.PSH | pk.TcpFlag.ACK, seq=seq))

        self.sim.at(self.sim.now + self.script.gap_ms, "client", second)


class _FragAgent(_Agent):
    script: FragEvasion

    def established(self, server: str) -> None:
        s = self.script
        ident = self.client.next_ip_id()
        raw = {}
        for alt, payload in ((False, s.payload), (True, s.alt_payload)):
            seg = pk.with_checksum(self.segment(payload, pk.TcpFlag.PSH | pk.TcpFlag.ACK), self.client.ip, self.sim.vip)
            raw[alt] = pk.encode_tcp(seg)
        total = len(raw[False])
        for start, end, alt in s.plan:
            self.client.send(
                pk.IpPacket(
                    src_ip=self.client.ip,
                    dst_ip=self.sim.vip,
                    protocol=pk.PROTO_TCP,
                    payload=raw[alt][start:end],
                    identification=ident,
                    fragment_offset=start // 8,
                    more_fragments=end < total,
                )
            )
        self.snd_nxt = (self.snd_nxt + len(s.payload)) & 0xFFFFFFFF


class _ReconnectAgent(_Agent):
    script: Reconnect

    def __init__(self, *args) -> None:
        super().__init__(*args)
        self.phase = 1
        self.last_heard = 0

    def established(self, server: str) -> None:
        if self.phase == 1:
            self.send_data(self.script.exploit)
            self.last_heard = self.sim.now
            self.sim.at(self.sim.now + self.script.silence_ms, "client", self._check_silence)
        else:
            for i, data in enumerate(self.script.followups):
                self.sim.at(self.sim.now + i * self.script.followup_gap_ms, "client", lambda d=data: self.send_data(d))

    def data(self, seg: pk.TcpSegment, server: str) -> None:
        self.last_heard = self.sim.now

    def _check_silence(self) -> None:
        if self.phase == 1 and self.sim.now - self.last_heard >= self.script.silence_ms:
            self.phase = 2
            self.sim.trace.log(self.sim.now, "reconnect", f"client={pk.int_to_ip(self.client.ip)}")
            self.open()


_AGENTS: dict[type, type[_Agent]] = {
    BenignRequest: _BenignAgent,
    ExploitDirect: _ExploitAgent,
    DuplicateSeqEvasion: _DupSeqAgent,
    FragEvasion: _FragAgent,
    Reconnect: _ReconnectAgent,
}


class _Client:
    def __init__(self, sim: Simulator, ip: int):
        self.sim = sim
        self.ip = ip
        self.node = _client_node(ip)
        self.ports: dict[int, _Agent] = {}
        self._next_port = 40000
        self._ip_id = sim.rng.getrandbits(16)

    def allocate_port(self, agent: _Agent) -> int:
        port = self._next_port
        self._next_port += 1
        self.ports[port] = agent
        return port

    def next_ip_id(self) -> int:
        self._ip_id = (self._ip_id + 1) & 0xFFFF
        return self._ip_id

    def send(self, pkt: pk.IpPacket) -> None:
        pid = self.sim.send(self.node, BALANCER, pkt, injected=True)
        if pkt.is_fragment:
            data = pkt.payload
        else:
            data = pk.parse_tcp(pkt).payload
        self.sim.trace.sent_by_client.setdefault(self.ip, []).append((-1, pid, data))
        self.sim._sent_index[pid] = (self.ip, len(self.sim.trace.sent_by_client[self.ip]) - 1)

    def receive(self, pkt: pk.IpPacket, src_node: str) -> None:
        try:
            seg = pk.parse_tcp(pkt)
        except pk.PacketError:
            return
        agent = self.ports.get(seg.dst_port)
        if agent is not None:
            agent.on_packet(pkt, seg, src_node)


# -- simulator ---------------------------------------------------------------


class Simulator:
    def __init__(
        self,
        topology: Topology,
        scripts: Sequence[tuple[str, TrafficScript]],
        seed: int = 0,
        until: int | None = None,
        db: SignatureDb | None = None,
        max_events: int = 5_000_000,
        record_events: bool = True,
    ):
        self.topology = topology
        self.seed = seed
        self.rng = random.Random(seed)
        self.db = db if db is not None else default_signatures()
        self.max_events = max_events
        self.record_events = record_events
        self.vip = pk.ip_to_int(topology.vip)
        self.now = 0
        self._queue: list[SimEvent] = []
        self._seq = 0
        self._pid = 0
        self._request_id = 0
        self._sent_index: dict[int, tuple[int, int]] = {}

        self.balancer = Balancer(topology.config(), _SimIds(self.db, topology.ids_enabled))
        self.backends = {
            b.id: _Backend(self, b.id, b.address) for b in self.balancer.pool.backends
        }
        self.honeypot = Honeypot(script=topology.decoy, outbound_budget=topology.outbound_budget)
        self.clients: dict[int, _Client] = {}
        self.agents: list[_Agent] = []

        last_start = 0
        for index, (ip, script) in enumerate(scripts):
            ip_int = pk.ip_to_int(ip)
            client = self.clients.get(ip_int)
            if client is None:
                client = self.clients[ip_int] = _Client(self, ip_int)
            agent = _AGENTS[type(script)](self, client, script, index)
            self.agents.append(agent)
            self.at(script.start_ms, "client", agent.start)
            last_start = max(last_start, script.start_ms)
        self.until = until if until is not None else last_start + 2000
        self.trace = SimTrace(seed=seed, until=self.until)

        self._bal_queue: deque[tuple[int, pk.IpPacket]] = deque()
        self._bal_busy = False
        self._pending_frags: dict[tuple, list[int]] = defaultdict(list)
        self._ingest_count = 0
        self.at(0, "tick", self._tick)
        self.at(0, "probe", self._probe)

    # scheduling ---------------------------------------------------------------

    def at(self, when: int, kind: str, handler: Callable[[], None]) -> None:
        if when < self.now:
            raise ValueError(f"cannot schedule {kind} at {when} before now={self.now}")
        self._seq += 1
        heapq.heappush(self._queue, SimEvent(when, self._seq, kind, handler))

    def next_request_id(self) -> int:
        self._request_id += 1
        return self._request_id

    def log(self, kind: str, detail: str) -> None:
        if self.record_events:
            self.trace.log(self.now, kind, detail)

    def send(self, src: str, dst: str, pkt: pk.IpPacket, injected: bool = False) -> int:
        self._pid += 1
        pid = self._pid
        if injected:
            self.trace.injected.append(pid)
        self.log("send", f"pid={pid} from={src} to={dst} {_describe(pkt)}")
        rate = self.topology.loss_rate(src, dst)
        if rate and self.rng.random() < rate:
            self.log("lost", f"pid={pid} link={src}->{dst}")
            if injected:
                self.trace.disposition[pid] = "lost"
            return pid
        arrive = self.now + self.topology.latency(src, dst)
        self.at(arrive, "deliver", lambda: self._deliver(pid, src, dst, pkt))
        return pid

    def _deliver(self, pid: int, src: str, dst: str, pkt: pk.IpPacket) -> None:
        self.log("recv", f"pid={pid} node={dst}")
        if dst == BALANCER:
            self._bal_queue.append((pid, pkt))
            if not self._bal_busy:
                self._bal_next()
        elif dst == HONEYPOT:
            replies, _ = self.honeypot.accept(pkt, self.now / 1000)
            for reply in replies:
                self.send(HONEYPOT, _client_node(reply.dst_ip), reply)
        elif dst in self.backends:
            self.backends[dst].receive(pkt, src)
        else:
            client = self.clients.get(pkt.dst_ip)
            if client is not None:
                client.receive(pkt, src)

    # balancer -------------------------------------------------------------------

    def _bal_next(self) -> None:
        if not self._bal_queue:
            self._bal_busy = False
            return
        self._bal_busy = True
        pid, pkt = self._bal_queue.popleft()
        self._ingest_count += 1
        self.trace.ingest_order[pid] = self._ingest_count
        ip, index = self._sent_index.get(pid, (None, None))
        if ip is not None:
            entries = self.trace.sent_by_client[ip]
            _, p, data = entries[index]
            entries[index] = (self._ingest_count, p, data)
        queries_before = len(self.balancer.stats.query_log)
        flagged_before = self.balancer.attackers.is_flagged(pkt.src_ip, self.now / 1000)
        actions = self.balancer.ingest(pkt, self.now / 1000)
        if not flagged_before and self.balancer.attackers.is_flagged(pkt.src_ip, self.now / 1000):
            self.trace.flag_pid.setdefault(pkt.src_ip, pid)
            record = self.balancer.attackers.get(pkt.src_ip)
            self.log("flag", f"src={pk.int_to_ip(pkt.src_ip)} reason={record.reason} pid={pid}")
        self._account(pid, pkt, actions)
        cost = self.topology.balancer_proc_ms
        if len(self.balancer.stats.query_log) > queries_before:
            cost += self.topology.ids_latency_ms
        self.at(self.now + cost, "dispatch", lambda: self._dispatch(pid, actions))

    def _account(self, pid: int, pkt: pk.IpPacket, actions: list[Action]) -> None:
        if pid not in self._sent_index:
            return
        pids = [pid]
        if pkt.is_fragment:
            key = frag_key(pkt)
            if key in self.balancer.fragments:
                self._pending_frags[key].append(pid)
                self.trace.disposition[pid] = "buffered"
                return
            pids = self._pending_frags.pop(key, []) + [pid]
        outcome = "dropped"
        for action in actions:
            if isinstance(action, ForwardToBackend):
                outcome = "backend"
            elif isinstance(action, ForwardToHoneypot):
                outcome = "honeypot"
        for p in pids:
            self.trace.disposition[p] = outcome

    def _dispatch(self, pid: int, actions: list[Action]) -> None:
        for action in actions:
            self.trace.actions.append((self.now, pid, action))
            if isinstance(action, ForwardToBackend):
                self.log("action", f"forward pid={pid} backend={action.backend}")
                self.send(BALANCER, action.backend, action.packet)
            elif isinstance(action, ForwardToHoneypot):
                self.log("action", f"deflect pid={pid}")
                self.send(BALANCER, HONEYPOT, action.packet)
            elif isinstance(action, EmitRst):
                self.log("action", f"rst pid={pid} backend={action.backend}")
                self.send(BALANCER, action.backend, action.packet)
            elif isinstance(action, Drop):
                self.log("action", f"drop pid={pid} reason={action.reason}")
        self._bal_next()

    def _tick(self) -> None:
        for action in self.balancer.tick(self.now / 1000):
            if isinstance(action, Drop) and action.packet is not None:
                key = frag_key(action.packet)
                for p in self._pending_frags.pop(key, []):
                    self.trace.disposition[p] = "dropped"
                self.log("action", f"drop reason={action.reason}")
        nxt = self.now + self.topology.tick_interval_ms
        if nxt <= self.until:
            self.at(nxt, "tick", self._tick)

    def _probe(self) -> None:
        due = self.balancer.probes_due(self.now / 1000)
        if due:
            sent_at = self.now
            results = {b: not self.topology.is_down(b, sent_at) for b in due}

            def answer() -> None:
                change = self.balancer.health_tick(results, self.now / 1000)
                for b in change.went_down:
                    self.log("health", f"backend={b} state=down")
                for b in change.came_up:
                    self.log("health", f"backend={b} state=up")

            self.at(self.now + self.topology.probe_rtt_ms, "probe-result", answer)
        nxt = self.now + round(self.topology.probe_interval_s * 1000)
        if nxt <= self.until:
            self.at(nxt, "probe", self._probe)

    # run --------------------------------------------------------------------------

    def run(self) -> SimTrace:
        processed = 0
        while self._queue and self._queue[0].at <= self.until:
            event = heapq.heappop(self._queue)
            self.now = event.at
            event.handler()
            processed += 1
            if processed > self.max_events:
                raise ScheduleOverflow(f"more than {self.max_events} events")
        self._finish(processed)
        return self.trace

    def _finish(self, processed: int) -> None:
        trace = self.trace
        trace.event_count = processed
        trace.attackers = self.balancer.attackers.snapshot()
        trace.captures = self.honeypot.log
        trace.backend_streams = {b.id: {k: bytes(v) for k, v in b.streams.items()} for b in self.backends.values()}
        trace.backend_segments = {b.id: list(b.segments) for b in self.backends.values()}
        trace.ids_queries = Counter(self.balancer.stats.ids_queries)
        trace.queries_after_flag = {r.ip: self.balancer.queries_after_flag(r.ip) for r in trace.attackers}
        for pid in trace.injected:
            trace.disposition.setdefault(pid, "in-flight")
        for record in trace.attackers:
            self.log("attacker", record.to_line())


def _describe(pkt: pk.IpPacket) -> str:
    src, dst = pk.int_to_ip(pkt.src_ip), pk.int_to_ip(pkt.dst_ip)
    if pkt.is_fragment:
        return f"frag {src}>{dst} id={pkt.identification} off={pkt.fragment_offset * 8} len={len(pkt.payload)} mf={int(pkt.more_fragments)}"
    try:
        seg = pk.parse_tcp(pkt)
    except pk.PacketError:
        return f"ip {src}>{dst} proto={pkt.protocol} len={len(pkt.payload)}"
    flags = "".join(name[0] for name in ("SYN", "ACK", "FIN", "RST", "PSH") if seg.flags & pk.TcpFlag[name]) or "-"
    return f"tcp {src}:{seg.src_port}>{dst}:{seg.dst_port} flags={flags} seq={seg.seq} len={len(seg.payload)}"


def run(
    topology: Topology,
    scripts: Sequence[tuple[str, TrafficScript]],
    seed: int = 0,
    until: int | None = None,
    db: SignatureDb | None = None,
    **kwargs,
) -> SimTrace:
    return Simulator(topology, scripts, seed, until, db, **kwargs).run()


# -- scenarios -----------------------------------------------------------------

BENIGN_CLIENT = "192.0.2.10"
ATTACKER = "198.51.100.66"


def benign_request(path: str = "/index.html") -> bytes:
    return f"GET {path} HTTP/1.0\r\nHost: www.example.com\r\n\r\n".encode()


def attack_payload(db: SignatureDb, index: int = 0) -> bytes:
    sig = db.signatures[index % len(db)]
    return b"GET /cgi-bin/x?" + sig.pattern + b" HTTP/1.0\r\n\r\n"


def scenario_duplicate_seq(
    seed: int = 0, *, identical: bool = False, topology: Topology | None = None, db: SignatureDb | None = None
) -> SimTrace:
    db = db or default_signatures()
    benign = benign_request("/login.html")
    attack = benign if identical else attack_payload(db)
    scripts = [
        (BENIGN_CLIENT, BenignRequest(benign_request(), start_ms=0)),
        (ATTACKER, DuplicateSeqEvasion(benign, attack, start_ms=5)),
        (ATTACKER, BenignRequest(benign_request("/after.html"), start_ms=200)),
    ]
    return run(topology or Topology(), scripts, seed, until=1000, db=db)


def clean_fragment_plan(total: int, rng: random.Random, max_pieces: int = 4) -> tuple[tuple[int, int, bool], ...]:
    """A random partition of ``[0, total)`` at 8-byte aligned cuts, shuffled."""
    slots = list(range(8, total, 8))
    k = min(len(slots), rng.randint(1, max_pieces - 1))
    cuts = sorted(rng.sample(slots, k)) if k else []
    bounds = [0, *cuts, total]
    plan = [(lo, hi, False) for lo, hi in zip(bounds, bounds[1:])]
    rng.shuffle(plan)
    return tuple(plan)


def conflicting_fragment_plan(
    payload: bytes, alt_payload: bytes, rng: random.Random
) -> tuple[tuple[int, int, bool], ...]:
    """A plan that sends one range twice, once from each payload variant.

    The duplicated range covers the first byte where the variants differ,
    and both copies go out before the range that completes the datagram,
    so the conflict is always visible to the reassembler.
    """
    if payload == alt_payload or len(payload) != len(alt_payload):
        raise ValueError("variants must differ and have equal length")
    total = pk.TCP_HEADER_LEN + len(payload)
    first_diff = pk.TCP_HEADER_LEN + next(i for i, (a, b) in enumerate(zip(payload, alt_payload)) if a != b)
    cut = (first_diff // 8 + 1) * 8
    if cut < total:
        order = [(0, cut, False), (0, cut, True)]
        rng.shuffle(order)
        return (*order, (cut, total, False))
    # difference in the last block: duplicate the tail and send the head last,
    # since a whole segment at offset 0 would not be a fragment at all
    lo = first_diff // 8 * 8
    order = [(lo, total, False), (lo, total, True)]
    rng.shuffle(order)
    return (*order, (0, lo, False))


def scenario_frag_evasion(seed: int = 0, *, topology: Topology | None = None, db: SignatureDb | None = None) -> SimTrace:
    db = db or default_signatures()
    rng = random.Random(seed)
    benign = benign_request("/fragmented.html")
    attack = attack_payload(db)
    attack = attack[: len(benign)].ljust(len(benign), b" ")
    if not db.inspect(attack).attack:
        attack = (db.signatures[0].pattern * (len(benign) // len(db.signatures[0].pattern) + 1))[: len(benign)]
    scripts = [
        (BENIGN_CLIENT, BenignRequest(benign, start_ms=0, fragment_cuts=(16,))),
        (ATTACKER, FragEvasion(benign, conflicting_fragment_plan(benign, attack, rng), alt_payload=attack, start_ms=5)),
        (ATTACKER, BenignRequest(benign_request("/after.html"), start_ms=200)),
    ]
    return run(topology or Topology(), scripts, seed, until=1000, db=db)


def scenario_reconnect_to_honeypot(
    seed: int = 0, *, topology: Topology | None = None, db: SignatureDb | None = None
) -> SimTrace:
    db = db or default_signatures()
    scripts = [
        (BENIGN_CLIENT, BenignRequest(benign_request(), start_ms=0)),
        (ATTACKER, Reconnect(attack_payload(db), followups=(b"GET / HTTP/1.0\r\n\r\n", b"USER root\r\n", b"PASS toor\r\n"), start_ms=5)),
        (BENIGN_CLIENT, BenignRequest(benign_request("/second.html"), start_ms=300)),
    ]
    return run(topology or Topology(), scripts, seed, until=1000, db=db)


def scenario_baseline(seed: int = 0, *, topology: Topology | None = None, db: SignatureDb | None = None, requests: int = 10) -> SimTrace:
    rng = random.Random(seed)
    scripts = [
        (f"192.0.2.{10 + i % 5}", BenignRequest(benign_request(f"/page{i}.html"), start_ms=i * 20 + rng.randrange(10)))
        for i in range(requests)
    ]
    return run(topology or Topology(), scripts, seed, db=db)


_BENIGN_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789-_"


def random_benign(rng: random.Random, db: SignatureDb) -> bytes:
    while True:
        path = "/" + "".join(rng.choice(_BENIGN_ALPHABET) for _ in range(rng.randint(1, 40)))
        request = benign_request(path)
        if not db.inspect(request).attack:
            return request


def random_attack(rng: random.Random, db: SignatureDb) -> bytes:
    sig = rng.choice(db.signatures)
    prefix = "".join(rng.choice(_BENIGN_ALPHABET) for _ in range(rng.randint(0, 30))).encode()
    return b"GET /" + prefix + sig.pattern + b" HTTP/1.0\r\n\r\n"


def mixed_scripts(seed: int, db: SignatureDb, n_benign: int = 6, n_attack: int = 3) -> list[tuple[str, TrafficScript]]:
    """Randomised interleaving of benign and hostile clients, pure in ``seed``."""
    rng = random.Random(seed)
    scripts: list[tuple[str, TrafficScript]] = []
    for i in range(n_benign):
        request = random_benign(rng, db)
        cuts: tuple[int, ...] = ()
        if rng.random() < 0.3:
            total = pk.TCP_HEADER_LEN + len(request)
            cuts = tuple(c for c, _, _ in sorted(clean_fragment_plan(total, rng)) if c)
        scripts.append((f"192.0.2.{10 + i}", BenignRequest(request, start_ms=rng.randrange(200), fragment_cuts=cuts)))
    for i in range(n_attack):
        ip = f"198.51.100.{10 + i}"
        start = rng.randrange(200)
        kind = rng.randrange(5)
        attack = random_attack(rng, db)
        if kind == 0:
            script: TrafficScript = ExploitDirect(attack, start)
        elif kind == 1:
            script = DuplicateSeqEvasion(random_benign(rng, db), attack, start)
        elif kind == 2:
            benign = random_benign(rng, db)
            alt = attack[: len(benign)].ljust(len(benign), b"#")
            if alt == benign:
                alt = alt[:-1] + b"#"
            script = FragEvasion(benign, conflicting_fragment_plan(benign, alt, rng), alt_payload=alt, start_ms=start)
        elif kind == 3:
            total = pk.TCP_HEADER_LEN + len(attack)
            script = FragEvasion(attack, clean_fragment_plan(total, rng), start_ms=start)
        else:
            script = Reconnect(attack, followups=(random_benign(rng, db),), start_ms=start)
        scripts.append((ip, script))
        if rng.random() < 0.5:
            # the same source also sends ordinary traffic, before or after
            scripts.append((ip, BenignRequest(random_benign(rng, db), start_ms=rng.randrange(300))))
    scripts.sort(key=lambda item: item[1].start_ms)
    return scripts


def scenario_mixed(seed: int = 0, *, topology: Topology | None = None, db: SignatureDb | None = None) -> SimTrace:
    db = db or default_signatures()
    return run(topology or Topology(), mixed_scripts(seed, db), seed, until=1500, db=db)


SCENARIOS: dict[str, Callable[..., SimTrace]] = {
    "baseline": scenario_baseline,
    "duplicate-seq": scenario_duplicate_seq,
    "frag-evasion": scenario_frag_evasion,
    "reconnect": scenario_reconnect_to_honeypot,
    "mixed": scenario_mixed,
}


def summarize(trace: SimTrace, topology: Topology | None = None) -> str:
    topology = topology or Topology()
    served = Counter(c.server for c in trace.completions)
    production = sum(n for s, n in served.items() if s != HONEYPOT)
    lines = [
        f"seed {trace.seed}, {trace.event_count} events, until {trace.until} ms",
        f"requests completed: {len(trace.completions)} ({production} by production backends"
        + (", " + ", ".join(f"{s}={n}" for s, n in sorted(served.items())) if served else "")
        + ")",
        f"attackers flagged: {len(trace.attackers)}",
    ]
    for record in trace.attackers:
        lines.append(f"  {record.to_line()}")
    lines.append(f"honeypot engaged: {'yes' if len(trace.captures) else 'no'} ({len(trace.captures)} capture records)")
    lines.append(f"resets sent: {len(trace.rst)} (accepted {sum(1 for r in trace.rst if r[3])})")
    lines.append(f"IDS queries: {sum(trace.ids_queries.values())}")
    outcome = trace.conservation()
    lines.append("injected packets: " + ", ".join(f"{k}={v}" for k, v in sorted(outcome.items())))
    return "\n".join(lines) + "\n"


def signature_hits(db: SignatureDb, streams: Iterable[bytes]) -> list[bytes]:
    """Streams containing any loaded pattern (plain substring test)."""
    patterns = db.patterns()
    return [s for s in streams if any(p in s for p in patterns)]


__all__ = [
    "BenignRequest",
    "DuplicateSeqEvasion",
    "ExploitDirect",
    "FragEvasion",
    "Reconnect",
    "SCENARIOS",
    "ScheduleOverflow",
    "SimEvent",
    "SimTrace",
    "Simulator",
    "Topology",
    "run",
    "scenario_duplicate_seq",
    "scenario_frag_evasion",
    "scenario_reconnect_to_honeypot",
]
