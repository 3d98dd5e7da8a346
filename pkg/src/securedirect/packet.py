"""IPv4 / TCP wire codec, checksums and RST construction.

Addresses are held as 32-bit integers; use :func:`ip_to_int` and
:func:`int_to_ip` at the edges.  Only IPv4 is understood.  IP options and
TCP options are carried as opaque bytes so parse/serialize round-trips.
"""

from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

from .kernels import ones_complement_sum

if TYPE_CHECKING:
    from .session import SessionEntry

PROTO_TCP = 6
PROTO_UDP = 17

IP_HEADER_LEN = 20
TCP_HEADER_LEN = 20
MAX_DATAGRAM = 65535

_IP_FIXED = struct.Struct("!BBHHHBBH4s4s")
_TCP_FIXED = struct.Struct("!HHIIBBHHH")


class PacketError(ValueError):
    """Base class for codec failures."""


class Malformed(PacketError):
    pass


class Oversize(PacketError):
    pass


class NotTcp(PacketError):
    pass


class NoState(PacketError):
    """A session has not seen any client segment to anchor sequence numbers."""


class TcpFlag(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20
    ECE = 0x40
    CWR = 0x80


def ip_to_int(addr: str | int) -> int:
    if isinstance(addr, int):
        return addr
    return int(ipaddress.IPv4Address(addr))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


def fold_checksum(total: int) -> int:
    """Fold a word sum to 16 bits and complement it."""
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def internet_checksum(data: bytes) -> int:
    return fold_checksum(ones_complement_sum(data))


@dataclass(frozen=True)
class IpPacket:
    src_ip: int
    dst_ip: int
    protocol: int
    payload: bytes = b""
    identification: int = 0
    fragment_offset: int = 0  # units of 8 bytes
    more_fragments: bool = False
    ttl: int = 64
    tos: int = 0
    dont_fragment: bool = False
    options: bytes = b""

    @property
    def is_fragment(self) -> bool:
        return self.more_fragments or self.fragment_offset != 0

    @property
    def header_len(self) -> int:
        return IP_HEADER_LEN + len(self.options)

    @property
    def total_length(self) -> int:
        return self.header_len + len(self.payload)


@dataclass(frozen=True)
class TcpSegment:
    src_port: int
    dst_port: int
    seq: int
    ack: int = 0
    flags: TcpFlag = TcpFlag(0)
    checksum: int = 0
    payload: bytes = b""
    window: int = 65535
    urgent: int = 0
    options: bytes = b""
    reserved: int = 0  # the 4 bits between data offset and flags

    @property
    def header_len(self) -> int:
        return TCP_HEADER_LEN + len(self.options)

    def has(self, flag: TcpFlag) -> bool:
        return bool(self.flags & flag)


@dataclass(frozen=True, order=True)
class FiveTuple:
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    protocol: int = PROTO_TCP

    def __str__(self) -> str:
        return (
            f"{int_to_ip(self.src_ip)}:{self.src_port}->"
            f"{int_to_ip(self.dst_ip)}:{self.dst_port}/{self.protocol}"
        )


def five_tuple(pkt: IpPacket, seg: TcpSegment) -> FiveTuple:
    return FiveTuple(pkt.src_ip, pkt.dst_ip, seg.src_port, seg.dst_port, pkt.protocol)


def parse_ipv4(data: bytes) -> IpPacket:
    """Decode one IPv4 datagram.

    Bytes beyond the header's total length are ignored, so
    ``serialize_ipv4(parse_ipv4(b))`` equals ``b`` truncated to its total
    length.  The header checksum must verify.
    """
    data = bytes(data)
    if len(data) < IP_HEADER_LEN:
        raise Malformed(f"truncated header: {len(data)} bytes")
    (ver_ihl, tos, total_len, ident, frag, ttl, proto, _csum, src, dst) = _IP_FIXED.unpack_from(data)
    version, ihl = ver_ihl >> 4, ver_ihl & 0x0F
    if version != 4:
        raise Malformed(f"version {version}")
    hlen = ihl * 4
    if hlen < IP_HEADER_LEN:
        raise Malformed(f"header length {hlen}")
    if len(data) < hlen or total_len < hlen or total_len > len(data):
        raise Malformed(f"total length {total_len} inconsistent with {len(data)} bytes")
    if internet_checksum(data[:hlen]) != 0:
        raise Malformed("header checksum invalid")
    if frag & 0x8000:
        raise Malformed("reserved fragment flag set")
    return IpPacket(
        src_ip=int.from_bytes(src, "big"),
        dst_ip=int.from_bytes(dst, "big"),
        protocol=proto,
        payload=data[hlen:total_len],
        identification=ident,
        fragment_offset=frag & 0x1FFF,
        more_fragments=bool(frag & 0x2000),
        ttl=ttl,
        tos=tos,
        dont_fragment=bool(frag & 0x4000),
        options=data[IP_HEADER_LEN:hlen],
    )


def serialize_ipv4(pkt: IpPacket) -> bytes:
    if len(pkt.options) % 4 or len(pkt.options) > 40:
        raise Malformed("IP options must be a multiple of 4 bytes, at most 40")
    if pkt.total_length > MAX_DATAGRAM or pkt.fragment_offset * 8 + len(pkt.payload) > MAX_DATAGRAM:
        raise Oversize(f"datagram of {pkt.total_length} bytes")
    frag = (
        (pkt.fragment_offset & 0x1FFF)
        | (0x2000 if pkt.more_fragments else 0)
        | (0x4000 if pkt.dont_fragment else 0)
    )
    header = bytearray(
        _IP_FIXED.pack(
            0x40 | (pkt.header_len // 4),
            pkt.tos,
            pkt.total_length,
            pkt.identification,
            frag,
            pkt.ttl,
            pkt.protocol,
            0,
            pkt.src_ip.to_bytes(4, "big"),
            pkt.dst_ip.to_bytes(4, "big"),
        )
    )
    header += pkt.options
    struct.pack_into("!H", header, 10, internet_checksum(bytes(header)))
    return bytes(header) + pkt.payload


def parse_tcp(pkt: IpPacket) -> TcpSegment:
    if pkt.protocol != PROTO_TCP:
        raise NotTcp(f"protocol {pkt.protocol}")
    if pkt.is_fragment:
        raise Malformed("cannot decode TCP from an unreassembled fragment")
    return decode_tcp(pkt.payload)


def decode_tcp(raw: bytes) -> TcpSegment:
    if len(raw) < TCP_HEADER_LEN:
        raise Malformed(f"truncated TCP header: {len(raw)} bytes")
    sport, dport, seq, ack, off_byte, flags, window, csum, urg = _TCP_FIXED.unpack_from(raw)
    hlen = (off_byte >> 4) * 4
    if hlen < TCP_HEADER_LEN or hlen > len(raw):
        raise Malformed(f"TCP data offset {hlen}")
    return TcpSegment(
        src_port=sport,
        dst_port=dport,
        seq=seq,
        ack=ack,
        flags=TcpFlag(flags),
        checksum=csum,
        payload=raw[hlen:],
        window=window,
        urgent=urg,
        options=raw[TCP_HEADER_LEN:hlen],
        reserved=off_byte & 0x0F,
    )


def _tcp_header(seg: TcpSegment, checksum: int) -> bytes:
    if len(seg.options) % 4 or len(seg.options) > 40:
        raise Malformed("TCP options must be a multiple of 4 bytes, at most 40")
    return (
        _TCP_FIXED.pack(
            seg.src_port,
            seg.dst_port,
            seg.seq & 0xFFFFFFFF,
            seg.ack & 0xFFFFFFFF,
            ((seg.header_len // 4) << 4) | (seg.reserved & 0x0F),
            int(seg.flags) & 0xFF,
            seg.window,
            checksum,
            seg.urgent,
        )
        + seg.options
    )


def _pseudo_header(src_ip: int, dst_ip: int, length: int) -> bytes:
    return struct.pack("!IIBBH", src_ip, dst_ip, 0, PROTO_TCP, length)


def tcp_checksum(seg: TcpSegment, src_ip: int, dst_ip: int) -> int:
    """Checksum value that makes ``seg`` verify between the given addresses."""
    body = _tcp_header(seg, 0) + seg.payload
    return fold_checksum(ones_complement_sum(_pseudo_header(src_ip, dst_ip, len(body)) + body))


def verify_checksum(seg: TcpSegment, src_ip: int, dst_ip: int) -> bool:
    body = _tcp_header(seg, seg.checksum) + seg.payload
    total = ones_complement_sum(_pseudo_header(src_ip, dst_ip, len(body)) + body)
    return total == 0xFFFF


def with_checksum(seg: TcpSegment, src_ip: int, dst_ip: int) -> TcpSegment:
    return replace(seg, checksum=tcp_checksum(seg, src_ip, dst_ip))


def encode_tcp(seg: TcpSegment) -> bytes:
    """Raw segment bytes using the checksum stored in ``seg``."""
    return _tcp_header(seg, seg.checksum) + seg.payload


def tcp_packet(
    src_ip: int,
    dst_ip: int,
    seg: TcpSegment,
    *,
    fix_checksum: bool = True,
    **ip_fields,
) -> IpPacket:
    """Wrap ``seg`` in an unfragmented IPv4 packet."""
    if fix_checksum:
        seg = with_checksum(seg, src_ip, dst_ip)
    return IpPacket(src_ip=src_ip, dst_ip=dst_ip, protocol=PROTO_TCP, payload=encode_tcp(seg), **ip_fields)


def fragment(pkt: IpPacket, cuts: list[int]) -> list[IpPacket]:
    """Split ``pkt``'s payload at byte offsets ``cuts`` (each a multiple of 8)."""
    bounds = [0, *sorted(set(cuts)), len(pkt.payload)]
    pieces = []
    for lo, hi in zip(bounds, bounds[1:]):
        if lo % 8:
            raise ValueError(f"fragment boundary {lo} is not 8-byte aligned")
        if hi <= lo:
            continue
        pieces.append(
            replace(
                pkt,
                payload=pkt.payload[lo:hi],
                fragment_offset=pkt.fragment_offset + lo // 8,
                more_fragments=hi < len(pkt.payload) or pkt.more_fragments,
            )
        )
    return pieces


def make_rst(conn: SessionEntry) -> IpPacket:
    """Reset for the backend side of ``conn``.

    The packet carries the client's addressing (the backend holds the VIP
    on its loopback and only accepts a reset that matches the connection)
    and is handed to the assigned backend by the caller.  Its sequence
    number is the next one the backend expects from the client.
    """
    if conn.next_seq is None:
        raise NoState(f"no client segment recorded for {conn.key}")
    key = conn.key
    seg = TcpSegment(
        src_port=key.src_port,
        dst_port=key.dst_port,
        seq=conn.next_seq,
        ack=0,
        flags=TcpFlag.RST,
        window=0,
    )
    return tcp_packet(key.src_ip, key.dst_ip, seg)

