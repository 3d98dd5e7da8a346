"""Stream-level proxy for live mode.

Live mode works on ordinary sockets, so it sees byte streams rather than
packets.  Reset injection, fragment reassembly and the duplicate-sequence
check exist only in the simulator; here the proxy inspects each chunk a
client sends, splices benign streams to a round-robin backend and moves
detected streams to the honeypot.  A flagged source goes straight to the
honeypot on later connections without an IDS query.
"""

from __future__ import annotations

import asyncio
import logging
import time
from collections import Counter
from typing import Callable

from .balancer import BackendPool, BalancerConfig, NoHealthyBackend, _split_hostport
from .ids import IdsUnavailable, Verdict
from .packet import ip_to_int
from .session import AttackerRegistry, signature_match

log = logging.getLogger(__name__)

CHUNK = 65536


async def _pipe(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
    try:
        while True:
            data = await reader.read(CHUNK)
            if not data:
                break
            writer.write(data)
            await writer.drain()
    except (ConnectionError, asyncio.CancelledError):
        pass
    finally:
        try:
            writer.write_eof()
        except (OSError, RuntimeError):
            pass


def _close(writer: asyncio.StreamWriter | None) -> None:
    if writer is not None:
        writer.close()


class LiveProxy:
    """Accept client connections and route each stream by IDS verdict.

    ``ids`` is a blocking verdict source (an ``IdsClient`` or any callable);
    it runs in the default executor so slow verdicts do not stall other
    connections.
    """

    def __init__(
        self,
        config: BalancerConfig,
        ids: Callable[[bytes], Verdict],
        clock: Callable[[], float] = time.monotonic,
    ):
        self.config = config
        self.ids = ids
        self.clock = clock
        self.pool = BackendPool(config.backends, config.failure_threshold)
        self.attackers = AttackerRegistry(config.attacker_ttl_s)
        self.ids_queries: Counter = Counter()
        self.routes: Counter = Counter()  # backend id or "honeypot" or "refused"
        self.server: asyncio.base_events.Server | None = None
        self._probe_task: asyncio.Task | None = None

    def _address(self, backend_id: str) -> tuple[str, int]:
        return _split_hostport(self.pool[backend_id].address, self.config.service_port)  # type: ignore[return-value]

    async def _verdict(self, src: int, chunk: bytes) -> Verdict:
        self.ids_queries[src] += 1
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(None, self.ids, chunk)

    async def _to_honeypot(
        self, src: int, first: bytes, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        self.routes["honeypot"] += 1
        host, port = self.config.honeypot_address()
        try:
            hp_reader, hp_writer = await asyncio.open_connection(host, port)
        except OSError as exc:
            log.warning("honeypot unreachable: %s", exc)
            return
        try:
            if first:
                hp_writer.write(first)
                await hp_writer.drain()
            await asyncio.gather(_pipe(reader, hp_writer), _pipe(hp_reader, writer))
        finally:
            _close(hp_writer)

    async def handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = writer.get_extra_info("peername") or ("0.0.0.0", 0)
        src = ip_to_int(peer[0])
        backend_writer: asyncio.StreamWriter | None = None
        relay: asyncio.Task | None = None
        try:
            if self.attackers.is_flagged(src, self.clock()):
                await self._to_honeypot(src, b"", reader, writer)
                return
            while True:
                chunk = await reader.read(CHUNK)
                if not chunk:
                    if backend_writer is not None:
                        backend_writer.write_eof()
                        if relay is not None:
                            await relay
                    return
                try:
                    verdict = await self._verdict(src, chunk)
                except IdsUnavailable as exc:
                    log.warning("ids unavailable, closing %s: %s", peer[0], exc)
                    self.routes["refused"] += 1
                    return
                if verdict.attack:
                    self.attackers.flag(src, signature_match(verdict.matched), self.clock())
                    if relay is not None:
                        relay.cancel()
                    _close(backend_writer)
                    backend_writer = None
                    await self._to_honeypot(src, chunk, reader, writer)
                    return
                if backend_writer is None:
                    try:
                        backend_id = self.pool.select()
                    except NoHealthyBackend:
                        self.routes["refused"] += 1
                        return
                    self.routes[backend_id] += 1
                    b_reader, backend_writer = await asyncio.open_connection(*self._address(backend_id))
                    relay = asyncio.ensure_future(_pipe(b_reader, writer))
                backend_writer.write(chunk)
                await backend_writer.drain()
        except (ConnectionError, OSError) as exc:
            log.debug("connection from %s ended: %s", peer[0], exc)
        finally:
            if relay is not None and not relay.done():
                relay.cancel()
            _close(backend_writer)
            _close(writer)

    async def _probe(self) -> None:
        while True:
            await asyncio.sleep(self.config.probe_interval_s)
            results = {}
            for backend_id in self.pool.ids():
                try:
                    _, w = await asyncio.wait_for(asyncio.open_connection(*self._address(backend_id)), 1.0)
                    w.close()
                    results[backend_id] = True
                except (OSError, asyncio.TimeoutError):
                    results[backend_id] = False
            change = self.pool.health_tick(results)
            for backend_id in change.went_down:
                log.warning("backend %s marked down", backend_id)
            for backend_id in change.came_up:
                log.info("backend %s back up", backend_id)

    async def start(self, host: str | None = None, port: int | None = None, probe: bool = True):
        host = host if host is not None else self.config.vip
        port = port if port is not None else self.config.service_port
        self.server = await asyncio.start_server(self.handle, host, port)
        if probe:
            self._probe_task = asyncio.ensure_future(self._probe())
        return self.server

    @property
    def address(self) -> tuple[str, int]:
        assert self.server is not None
        return self.server.sockets[0].getsockname()[:2]

    async def stop(self) -> None:
        if self._probe_task is not None:
            self._probe_task.cancel()
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
