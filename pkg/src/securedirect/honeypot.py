"""Decoy endpoint for deflected traffic.

Everything inbound is captured; outbound is limited to a scripted banner
and canned replies, capped per connection.  Capture files use the
``HPLOG1`` layout::

    b"HPLOG1\\n"
    repeated: u64 timestamp_ms | u32 src_ip | u16 src_port | u8 direction | u32 length | bytes
"""

from __future__ import annotations

import asyncio
import enum
import struct
import threading
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator

from . import packet as pk
from .kernels import fnv1a64

MAGIC = b"HPLOG1\n"
DEFAULT_OUTBOUND_BUDGET = 4096
_RECORD = struct.Struct("!QIHBI")


class CaptureFormatError(ValueError):
    pass


class Direction(enum.IntEnum):
    INBOUND = 0
    OUTBOUND = 1


@dataclass(frozen=True)
class CaptureRecord:
    timestamp_ms: int
    src_ip: int
    src_port: int
    direction: Direction
    data: bytes


@dataclass(frozen=True)
class DecoyScript:
    banner: bytes = b""
    responses: tuple[tuple[bytes, bytes], ...] = ()

    def reply_for(self, payload: bytes) -> bytes | None:
        for needle, reply in self.responses:
            if needle in payload:
                return reply
        return None


DEFAULT_SCRIPT = DecoyScript(
    banner=b"220 www ready\r\n",
    responses=(
        (b"GET /", b"HTTP/1.0 200 OK\r\nContent-Length: 13\r\n\r\n<html></html>"),
        (b"USER ", b"331 Password required\r\n"),
        (b"PASS ", b"230 Logged in\r\n"),
    ),
)


class CaptureLog:
    """Append-only, time-ordered capture records.  Appends are thread-safe."""

    def __init__(self, records: Iterable[CaptureRecord] = ()):
        self._records: list[CaptureRecord] = []
        self._lock = threading.Lock()
        for record in records:
            self.append(record)

    def append(self, record: CaptureRecord) -> None:
        with self._lock:
            if self._records and record.timestamp_ms < self._records[-1].timestamp_ms:
                raise ValueError("capture records must be appended in time order")
            self._records.append(record)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[CaptureRecord]:
        return iter(list(self._records))

    @property
    def records(self) -> tuple[CaptureRecord, ...]:
        return tuple(self._records)

    def bytes_from(self, src_ip: int | None = None, direction: Direction = Direction.INBOUND) -> bytes:
        return b"".join(
            r.data for r in self._records if r.direction is direction and (src_ip is None or r.src_ip == src_ip)
        )


def export_log(log: Iterable[CaptureRecord], sink: BinaryIO) -> int:
    sink.write(MAGIC)
    count = 0
    for r in log:
        sink.write(_RECORD.pack(r.timestamp_ms, r.src_ip, r.src_port, int(r.direction), len(r.data)))
        sink.write(r.data)
        count += 1
    sink.flush()
    return count


def import_log(source: BinaryIO) -> CaptureLog:
    if source.read(len(MAGIC)) != MAGIC:
        raise CaptureFormatError("missing HPLOG1 header")
    log = CaptureLog()
    while True:
        head = source.read(_RECORD.size)
        if not head:
            return log
        if len(head) < _RECORD.size:
            raise CaptureFormatError("truncated record header")
        ts, ip, port, direction, length = _RECORD.unpack(head)
        data = source.read(length)
        if len(data) < length:
            raise CaptureFormatError("truncated record payload")
        try:
            log.append(CaptureRecord(ts, ip, port, Direction(direction), data))
        except ValueError as exc:
            raise CaptureFormatError(str(exc)) from None


@dataclass
class _DecoyConn:
    snd_nxt: int
    rcv_nxt: int
    budget: int


@dataclass
class Honeypot:
    """Packet-level decoy used by the simulator.

    Replies claim to come from the address the attacker targeted (the
    VIP), so deflection is invisible at the network layer.  Segments for a
    connection whose handshake the decoy never saw are captured silently:
    the attacker just observes a server that stopped answering.
    """

    script: DecoyScript = DEFAULT_SCRIPT
    outbound_budget: int = DEFAULT_OUTBOUND_BUDGET
    log: CaptureLog = field(default_factory=CaptureLog)
    _conns: dict[tuple[int, int, int], _DecoyConn] = field(default_factory=dict, repr=False)
    _sent: dict[tuple[int, int], int] = field(default_factory=dict, repr=False)

    def outbound_bytes(self, src_ip: int, src_port: int) -> int:
        return self._sent.get((src_ip, src_port), 0)

    def accept(self, pkt: pk.IpPacket, now: float) -> tuple[list[pk.IpPacket], list[CaptureRecord]]:
        ts = round(now * 1000)
        records: list[CaptureRecord] = []
        try:
            seg = pk.parse_tcp(pkt)
        except pk.PacketError:
            records.append(CaptureRecord(ts, pkt.src_ip, 0, Direction.INBOUND, pkt.payload))
            self._commit(records)
            return [], records

        records.append(CaptureRecord(ts, pkt.src_ip, seg.src_port, Direction.INBOUND, seg.payload))
        key = (pkt.src_ip, seg.src_port, seg.dst_port)
        replies: list[pk.TcpSegment] = []
        conn = self._conns.get(key)

        if seg.has(pk.TcpFlag.RST):
            self._conns.pop(key, None)
        elif seg.has(pk.TcpFlag.SYN) and not seg.has(pk.TcpFlag.ACK):
            isn = fnv1a64(struct.pack("!IHHI", pkt.src_ip, seg.src_port, seg.dst_port, seg.seq)) & 0xFFFFFFFF
            budget = self.outbound_budget - self._sent.get((pkt.src_ip, seg.src_port), 0)
            conn = _DecoyConn(snd_nxt=(isn + 1) & 0xFFFFFFFF, rcv_nxt=(seg.seq + 1) & 0xFFFFFFFF, budget=budget)
            self._conns[key] = conn
            replies.append(pk.TcpSegment(seg.dst_port, seg.src_port, isn, conn.rcv_nxt, pk.TcpFlag.SYN | pk.TcpFlag.ACK))
            if self.script.banner:
                replies.extend(self._data(conn, seg, self.script.banner))
        elif conn is not None:
            end = (seg.seq + len(seg.payload) + seg.has(pk.TcpFlag.FIN)) & 0xFFFFFFFF
            if 0 < ((end - conn.rcv_nxt) & 0xFFFFFFFF) < 0x80000000:
                conn.rcv_nxt = end
            reply = self.script.reply_for(seg.payload) if seg.payload else None
            sent = self._data(conn, seg, reply) if reply else []
            if sent:
                replies.extend(sent)
            elif seg.payload or seg.has(pk.TcpFlag.FIN):
                flags = pk.TcpFlag.ACK | (pk.TcpFlag.FIN if seg.has(pk.TcpFlag.FIN) else pk.TcpFlag(0))
                replies.append(pk.TcpSegment(seg.dst_port, seg.src_port, conn.snd_nxt, conn.rcv_nxt, flags))
            if seg.has(pk.TcpFlag.FIN):
                del self._conns[key]

        out = []
        for reply in replies:
            out.append(pk.tcp_packet(pkt.dst_ip, pkt.src_ip, reply))
            if reply.payload:
                records.append(CaptureRecord(ts, pkt.src_ip, seg.src_port, Direction.OUTBOUND, reply.payload))
                self._sent[(pkt.src_ip, seg.src_port)] = self.outbound_bytes(pkt.src_ip, seg.src_port) + len(reply.payload)
        self._commit(records)
        return out, records

    def _data(self, conn: _DecoyConn, seg: pk.TcpSegment, data: bytes) -> list[pk.TcpSegment]:
        data = data[: max(conn.budget, 0)]
        if not data:
            return []
        conn.budget -= len(data)
        reply = pk.TcpSegment(
            seg.dst_port, seg.src_port, conn.snd_nxt, conn.rcv_nxt, pk.TcpFlag.PSH | pk.TcpFlag.ACK, payload=data
        )
        conn.snd_nxt = (conn.snd_nxt + len(data)) & 0xFFFFFFFF
        return [reply]

    def _commit(self, records: list[CaptureRecord]) -> None:
        for record in records:
            self.log.append(record)


def accept(honeypot: Honeypot, pkt: pk.IpPacket, now: float):
    return honeypot.accept(pkt, now)


class LiveHoneypot:
    """Stream-level decoy for live mode: one handler per deflected connection."""

    def __init__(
        self,
        script: DecoyScript = DEFAULT_SCRIPT,
        outbound_budget: int = DEFAULT_OUTBOUND_BUDGET,
        log: CaptureLog | None = None,
        clock=None,
    ):
        self.script = script
        self.outbound_budget = outbound_budget
        self.log = log if log is not None else CaptureLog()
        self._clock = clock
        self.server: asyncio.base_events.Server | None = None

    def _now_ms(self) -> int:
        if self._clock is not None:
            return int(self._clock())
        return int(asyncio.get_running_loop().time() * 1000)

    async def handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = writer.get_extra_info("peername") or ("0.0.0.0", 0)
        ip, port = pk.ip_to_int(peer[0]), peer[1]
        budget = self.outbound_budget

        async def send(data: bytes) -> None:
            nonlocal budget
            data = data[: max(budget, 0)]
            if data:
                budget -= len(data)
                self.log.append(CaptureRecord(self._now_ms(), ip, port, Direction.OUTBOUND, data))
                writer.write(data)
                await writer.drain()

        try:
            await send(self.script.banner)
            while True:
                chunk = await reader.read(65536)
                if not chunk:
                    break
                self.log.append(CaptureRecord(self._now_ms(), ip, port, Direction.INBOUND, chunk))
                reply = self.script.reply_for(chunk)
                if reply:
                    await send(reply)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            writer.close()

    async def start(self, host: str, port: int):
        self.server = await asyncio.start_server(self.handle, host, port)
        return self.server
