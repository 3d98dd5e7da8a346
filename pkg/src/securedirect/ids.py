"""Signature database, payload matcher and the balancer<->IDS query protocol.

Signature files are line oriented::

    # id name hex-pattern
    7 bin-sh 2f62696e2f7368

Wire protocol, one query per connection unless pooled::

    query    = "SD" 0x01 <u16 length> <payload>
    response = 0x00                                  benign
             | 0x01 <u8 count> <u32 id>*count         attack
             | 0xFF                                  protocol error
"""

from __future__ import annotations

import hashlib
import logging
import re
import socket
import struct
import threading
from array import array
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, TextIO, Union

from .kernels import dfa_scan

log = logging.getLogger(__name__)

MAGIC = b"SD"
VERSION = 1
VERDICT_BENIGN = 0x00
VERDICT_ATTACK = 0x01
VERDICT_ERROR = 0xFF
MAX_QUERY_PAYLOAD = 0xFFFF
MAX_MATCHES_ON_WIRE = 0xFF
DEFAULT_QUERY_TIMEOUT = 1.0

_HEADER = struct.Struct("!2sBH")
_NAME_RE = re.compile(r"^\S+$")


class SignatureError(ValueError):
    pass


class ParseError(SignatureError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class DuplicateId(SignatureError):
    def __init__(self, sig_id: int, lineno: int | None = None):
        where = f" (line {lineno})" if lineno is not None else ""
        super().__init__(f"duplicate signature id {sig_id}{where}")
        self.sig_id = sig_id
        self.lineno = lineno


class IdsUnavailable(Exception):
    """Any failure to obtain a verdict.  Callers must fail closed."""


class IdsTimeout(IdsUnavailable):
    pass


class ConnectFailed(IdsUnavailable):
    pass


class ProtocolError(IdsUnavailable):
    pass


@dataclass(frozen=True)
class Signature:
    id: int
    name: str
    pattern: bytes

    def __post_init__(self) -> None:
        if self.id < 1:
            raise SignatureError(f"signature id must be positive, got {self.id}")
        if not self.pattern:
            raise SignatureError(f"signature {self.id} has an empty pattern")
        if not _NAME_RE.match(self.name):
            raise SignatureError(f"signature {self.id} name must be one non-blank token")


@dataclass(frozen=True)
class Verdict:
    attack: bool
    matched: tuple[int, ...] = ()

    @classmethod
    def of(cls, ids: Iterable[int]) -> Verdict:
        matched = tuple(sorted(set(ids)))
        return cls(bool(matched), matched)


class Automaton:
    """Dense Aho-Corasick automaton over bytes.

    Failure links are folded into a full 256-way transition table so the
    scan loop is a single table lookup per byte.
    """

    def __init__(self, patterns: list[bytes]):
        self.n_patterns = len(patterns)
        goto: list[dict[int, int]] = [{}]
        outputs: list[list[int]] = [[]]
        for index, pattern in enumerate(patterns):
            state = 0
            for b in pattern:
                nxt = goto[state].get(b)
                if nxt is None:
                    nxt = len(goto)
                    goto[state][b] = nxt
                    goto.append({})
                    outputs.append([])
                state = nxt
            outputs[state].append(index)

        n_states = len(goto)
        delta = array("i", bytes(4 * 256 * n_states))
        fail = [0] * n_states
        queue: deque[int] = deque()
        for b in range(256):
            nxt = goto[0].get(b, 0)
            delta[b] = nxt
            if nxt:
                queue.append(nxt)
        while queue:
            state = queue.popleft()
            outputs[state].extend(outputs[fail[state]])
            base, fbase = state << 8, fail[state] << 8
            for b in range(256):
                nxt = goto[state].get(b)
                if nxt is None:
                    delta[base | b] = delta[fbase | b]
                else:
                    fail[nxt] = delta[fbase | b]
                    delta[base | b] = nxt
                    queue.append(nxt)

        out_start = array("i", [0])
        out_ids = array("i")
        for out in outputs:
            out_ids.extend(sorted(set(out)))
            out_start.append(len(out_ids))
        self.n_states = n_states
        self.delta = delta
        self.out_start = out_start
        self.out_ids = out_ids

    def scan(self, data: bytes) -> list[int]:
        """Indices of patterns occurring anywhere in ``data``, ascending."""
        return dfa_scan(self.delta, self.out_start, self.out_ids, self.n_patterns, bytes(data))


class SignatureDb:
    """Immutable, ordered set of signatures with a compiled matcher."""

    def __init__(self, signatures: Iterable[Signature] = (), source_digest: str | None = None):
        sigs = tuple(signatures)
        seen: set[int] = set()
        for sig in sigs:
            if sig.id in seen:
                raise DuplicateId(sig.id)
            seen.add(sig.id)
        self._signatures = sigs
        self.source_digest = source_digest or hashlib.sha256(dump_signatures(sigs).encode()).hexdigest()
        self._automaton = Automaton([s.pattern for s in sigs])

    @property
    def signatures(self) -> tuple[Signature, ...]:
        return self._signatures

    def __len__(self) -> int:
        return len(self._signatures)

    def __iter__(self):
        return iter(self._signatures)

    def inspect(self, payload: bytes) -> Verdict:
        hits = self._automaton.scan(payload)
        return Verdict.of(self._signatures[i].id for i in hits)

    def patterns(self) -> list[bytes]:
        return [s.pattern for s in self._signatures]


def inspect(db: SignatureDb, payload: bytes) -> Verdict:
    return db.inspect(payload)


def load_signatures(source: str | TextIO) -> SignatureDb:
    text = source if isinstance(source, str) else source.read()
    sigs: list[Signature] = []
    lines: dict[int, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(lineno, f"expected '<id> <name> <hex-pattern>', got {raw.strip()!r}")
        id_text, name, hex_pattern = parts
        try:
            sig_id = int(id_text, 10)
        except ValueError:
            raise ParseError(lineno, f"bad id {id_text!r}") from None
        if len(hex_pattern) % 2:
            raise ParseError(lineno, "hex pattern has odd length")
        try:
            pattern = bytes.fromhex(hex_pattern)
        except ValueError:
            raise ParseError(lineno, f"bad hex pattern {hex_pattern!r}") from None
        if sig_id in lines:
            raise DuplicateId(sig_id, lineno)
        try:
            sigs.append(Signature(sig_id, name, pattern))
        except SignatureError as exc:
            raise ParseError(lineno, str(exc)) from None
        lines[sig_id] = lineno
    return SignatureDb(sigs, hashlib.sha256(text.encode()).hexdigest())


def load_signature_file(path) -> SignatureDb:
    with open(path, encoding="utf-8") as fh:
        return load_signatures(fh)


def dump_signatures(signatures: Iterable[Signature]) -> str:
    return "".join(f"{s.id} {s.name} {s.pattern.hex()}\n" for s in signatures)


def default_signature_text() -> str:
    from importlib.resources import files

    return files("securedirect").joinpath("data/default.sigs").read_text(encoding="utf-8")


def default_signatures() -> SignatureDb:
    return load_signatures(default_signature_text())


# -- wire format -------------------------------------------------------------


def encode_query(payload: bytes) -> bytes:
    if len(payload) > MAX_QUERY_PAYLOAD:
        raise ValueError(f"payload of {len(payload)} bytes exceeds {MAX_QUERY_PAYLOAD}")
    return _HEADER.pack(MAGIC, VERSION, len(payload)) + payload


def encode_response(verdict: Verdict | None) -> bytes:
    """Encode a verdict; ``None`` encodes the protocol-error response."""
    if verdict is None:
        return bytes([VERDICT_ERROR])
    if not verdict.attack:
        return bytes([VERDICT_BENIGN])
    ids = verdict.matched[:MAX_MATCHES_ON_WIRE]
    return bytes([VERDICT_ATTACK, len(ids)]) + b"".join(i.to_bytes(4, "big") for i in ids)


def decode_response(data: bytes) -> Verdict:
    if not data:
        raise ProtocolError("empty response")
    code = data[0]
    if code == VERDICT_BENIGN and len(data) == 1:
        return Verdict(False)
    if code == VERDICT_ATTACK and len(data) >= 2:
        count = data[1]
        if len(data) != 2 + 4 * count or count == 0:
            raise ProtocolError("attack response length mismatch")
        return Verdict(True, tuple(int.from_bytes(data[2 + 4 * i:6 + 4 * i], "big") for i in range(count)))
    if code == VERDICT_ERROR:
        raise ProtocolError("server reported a protocol error")
    raise ProtocolError(f"bad response {data[:8].hex()}")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


def read_query(sock: socket.socket) -> bytes | None:
    """Read one query frame.  ``None`` on clean EOF before any byte."""
    header = _recv_exact(sock, _HEADER.size)
    if not header:
        return None
    if len(header) < _HEADER.size:
        raise ProtocolError("truncated header")
    magic, version, length = _HEADER.unpack(header)
    if magic != MAGIC or version != VERSION:
        raise ProtocolError(f"bad magic/version {header[:3].hex()}")
    payload = _recv_exact(sock, length)
    if len(payload) < length:
        raise ProtocolError(f"truncated payload: {len(payload)} of {length}")
    return payload


def _read_response(sock: socket.socket) -> Verdict:
    head = _recv_exact(sock, 1)
    if not head:
        raise ProtocolError("connection closed without a response")
    if head[0] != VERDICT_ATTACK:
        return decode_response(head)
    count = _recv_exact(sock, 1)
    if not count:
        raise ProtocolError("truncated attack response")
    body = _recv_exact(sock, 4 * count[0])
    return decode_response(head + count + body)


# -- server ------------------------------------------------------------------


class IdsServer:
    """Concurrent query server: one thread per accepted connection."""

    def __init__(self, db: SignatureDb, listener: socket.socket, *, pooled: bool = False, read_timeout: float = 5.0):
        self.db = db
        self.listener = listener
        self.pooled = pooled
        self.read_timeout = read_timeout
        self.queries = 0
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.listener.getsockname()[:2]

    def handle(self, conn: socket.socket) -> None:
        with conn:
            conn.settimeout(self.read_timeout)
            while True:
                try:
                    payload = read_query(conn)
                except (ProtocolError, OSError) as exc:
                    log.debug("bad query frame: %s", exc)
                    try:
                        conn.sendall(encode_response(None))
                    except OSError:
                        pass
                    return
                if payload is None:
                    return
                verdict = self.db.inspect(payload)
                with self._lock:
                    self.queries += 1
                try:
                    conn.sendall(encode_response(verdict))
                except OSError:
                    return
                if not self.pooled:
                    return

    def serve_forever(self) -> None:
        self.listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self.listener.accept()
            except socket.timeout:
                continue
            except OSError:
                if self._stop.is_set():
                    break
                raise
            threading.Thread(target=self.handle, args=(conn,), daemon=True).start()

    def start(self) -> IdsServer:
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
        self.listener.close()

    def __enter__(self) -> IdsServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def bind_listener(host: str, port: int, backlog: int = 128) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        sock.bind((host, port))
        sock.listen(backlog)
    except OSError:
        sock.close()
        raise
    return sock


def serve(db: SignatureDb, listener: socket.socket, *, pooled: bool = False) -> None:
    """Serve queries on ``listener`` until the process is interrupted."""
    IdsServer(db, listener, pooled=pooled).serve_forever()


# -- client ------------------------------------------------------------------

Connector = Union[tuple[str, int], Callable[[float], socket.socket]]


def _open(connector: Connector, timeout: float) -> socket.socket:
    try:
        if callable(connector):
            return connector(timeout)
        return socket.create_connection(connector, timeout=timeout)
    except socket.timeout as exc:
        raise IdsTimeout(f"connect timed out after {timeout}s") from exc
    except OSError as exc:
        raise ConnectFailed(str(exc)) from exc


def _exchange(sock: socket.socket, frame: bytes, timeout: float) -> Verdict:
    sock.settimeout(timeout)
    try:
        sock.sendall(frame)
        return _read_response(sock)
    except socket.timeout as exc:
        raise IdsTimeout(f"no response within {timeout}s") from exc
    except OSError as exc:
        raise ProtocolError(str(exc)) from exc


def query(connector: Connector, payload: bytes, timeout: float = DEFAULT_QUERY_TIMEOUT) -> Verdict:
    """Open a connection, send one query, read the verdict, close."""
    frame = encode_query(payload)
    with _open(connector, timeout) as sock:
        return _exchange(sock, frame, timeout)


class IdsClient:
    """Callable verdict source for the balancer, optionally on one pooled connection."""

    def __init__(self, connector: Connector, timeout: float = DEFAULT_QUERY_TIMEOUT, pooled: bool = False):
        self.connector = connector
        self.timeout = timeout
        self.pooled = pooled
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def __call__(self, payload: bytes) -> Verdict:
        if not self.pooled:
            return query(self.connector, payload, self.timeout)
        frame = encode_query(payload)
        with self._lock:
            if self._sock is None:
                self._sock = _open(self.connector, self.timeout)
            try:
                return _exchange(self._sock, frame, self.timeout)
            except IdsUnavailable:
                self._close()
                raise

    def _close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def close(self) -> None:
        with self._lock:
            self._close()


def verdict_text(verdict: Verdict) -> str:
    words = ["attack" if verdict.attack else "benign", *map(str, verdict.matched)]
    return " ".join(words)
