"""Acceptance suite: ten end-to-end criteria at their stated tolerances.

Each test carries a ``criterion`` number; a summary hook in conftest prints
one PASS/FAIL line per criterion at the end of the run.
"""

import io
import random
import socket
import time
from collections import Counter

import pytest

from securedirect import packet as pk
from securedirect.balancer import Balancer, BalancerConfig, EmitRst, ForwardToBackend
from securedirect.honeypot import Direction, export_log, import_log
from securedirect.ids import IdsServer, Signature, SignatureDb, bind_listener, default_signatures, inspect, query
from securedirect.loadgen import LatencyReport, LoadScenario, bench, read_csv, run_scenario, to_csv
from securedirect.session import Reason
from securedirect.simnet import (
    ATTACKER,
    HONEYPOT,
    FragEvasion,
    Topology,
    clean_fragment_plan,
    conflicting_fragment_plan,
    mixed_scripts,
    random_benign,
    run,
    scenario_duplicate_seq,
    scenario_mixed,
    scenario_reconnect_to_honeypot,
)

from .oracles import naive_matches, rfc1071_checksum, stats_from_csv, tcp_checksum_oracle

pytestmark = pytest.mark.acceptance

ATT = pk.ip_to_int(ATTACKER)


def criterion(n):
    def mark(fn):
        fn.criterion = n
        return fn

    return mark


@pytest.fixture(scope="module")
def mixed_traces(db):
    start = time.monotonic()
    traces = [scenario_mixed(seed, db=db) for seed in range(1000)]
    return traces, time.monotonic() - start


@criterion(1)
def test_safety_invariant(mixed_traces, db):
    """Safety: 1000 mixed traces, no signature bytes at any production backend, < 2 min."""
    traces, elapsed = mixed_traces
    patterns = db.patterns()
    dirty = []
    for trace in traces:
        for stream in trace.production_bytes():
            if any(p in stream for p in patterns):
                dirty.append(trace.seed)
        for seg in (s for segs in trace.backend_segments.values() for s in segs):
            if any(p in seg for p in patterns):
                dirty.append(trace.seed)
    assert dirty == []
    assert sum(len(t.attackers) for t in traces) > 1000  # attacks were actually present
    assert elapsed < 120, f"{elapsed:.1f}s"


@criterion(2)
def test_fast_path(mixed_traces):
    """Fast path: zero IDS queries for a flagged source after its flag time."""
    traces, _ = mixed_traces
    extra = [scenario_duplicate_seq(0), scenario_reconnect_to_honeypot(0)]
    flagged = 0
    for trace in [*traces, *extra]:
        for ip, after in trace.queries_after_flag.items():
            flagged += 1
            assert after == 0, (trace.seed, pk.int_to_ip(ip))
    assert flagged > 1000


@criterion(3)
def test_fail_closed(db):
    """Fail-closed: IDS disabled, no payload-bearing packet reaches a backend."""
    topology = Topology(ids_enabled=False)
    handshakes = 0
    for seed in range(50):
        trace = run(topology, mixed_scripts(seed, db), seed, until=1500, db=db)
        for _, _, action in trace.actions:
            if isinstance(action, ForwardToBackend):
                assert pk.parse_tcp(action.packet).payload == b""
                handshakes += 1
        assert all(stream == b"" for stream in trace.production_bytes())
    assert handshakes > 0  # handshakes still flow


@criterion(4)
def test_duplicate_seq(db):
    """Duplicate-seq evasion: flag, exactly one RST to the assigned backend, no attack bytes; identical control unflagged."""
    for seed in range(5):
        trace = scenario_duplicate_seq(seed, db=db)
        assert trace.flagged()[ATT].reason.kind is Reason.DUPLICATE_SEQ
        rsts = [a for _, _, a in trace.actions if isinstance(a, EmitRst)]
        assert len(rsts) == 1 and len(trace.rst) == 1
        _, backend, conn, accepted = trace.rst[0]
        assert accepted and conn.src_ip == ATT
        assert conn in trace.backend_streams[backend]  # the backend that held the connection
        assert rsts[0].backend == backend
        attack = b"GET /cgi-bin/x?" + db.signatures[0].pattern
        for streams in trace.backend_streams.values():
            assert all(attack not in s and db.signatures[0].pattern not in s for s in streams.values())
        control = scenario_duplicate_seq(seed, identical=True, db=db)
        assert control.attackers == () and control.rst == []


def _legal_plan(total, rng):
    plan = list(clean_fragment_plan(total, rng, max_pieces=5))
    # identical retransmissions and aligned overlaps are legal too
    for _ in range(rng.randint(0, 2)):
        lo = rng.randrange(0, max(1, (total - 1) // 8)) * 8
        hi = min(total - 1, lo + 8 * rng.randint(1, 4))
        hi -= (hi - lo) % 8
        if hi > lo:
            plan.insert(rng.randrange(len(plan) + 1), (lo, hi, False))
    return tuple(plan)


@criterion(5)
def test_fragment_consistency(db):
    """Fragmentation: 500 random payloads reassemble byte-exact; every conflicting-overlap plan is deflected."""
    rng = random.Random(2024)
    client = "192.0.2.77"
    for i in range(500):
        payload = random_benign(rng, db) + bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 64)))
        if inspect(db, payload).attack:
            continue
        total = pk.TCP_HEADER_LEN + len(payload)
        trace = run(Topology(), [(client, FragEvasion(payload, _legal_plan(total, rng)))], seed=i, until=500, db=db)
        streams = [s for per in trace.backend_streams.values() for s in per.values()]
        assert streams == [payload], i
        assert trace.attackers == ()

        alt = bytearray(payload)
        pos = rng.randrange(len(alt))
        alt[pos] ^= 1 + rng.randrange(255)
        plan = conflicting_fragment_plan(payload, bytes(alt), rng)
        trace = run(Topology(), [(ATTACKER, FragEvasion(payload, plan, alt_payload=bytes(alt)))], seed=i, until=500, db=db)
        assert trace.flagged()[ATT].reason.kind is Reason.FRAG_EVASION, i
        assert all(s == b"" for per in trace.backend_streams.values() for s in per.values())
        assert len(trace.captures) > 0


def _expiry_case(timeout):
    kw = {} if timeout is None else {"session_timeout_s": timeout}
    cfg = BalancerConfig(vip="10.0.0.100", service_port=80, backends=("10.0.0.1", "10.0.0.2"), honeypot="10.0.0.3", **kw)
    lb = Balancer(cfg, lambda payload: None)
    syn = pk.tcp_packet(1, cfg.vip_int, pk.TcpSegment(40000, 80, 0, flags=pk.TcpFlag.SYN))
    lb.ingest(syn, 1000.0)
    key = pk.FiveTuple(1, cfg.vip_int, 40000, 80)
    limit = cfg.session_timeout_s
    lb.tick(1000.0 + limit)
    present = key in lb.sessions
    lb.tick(1000.0 + limit + 1)
    return limit, present, key in lb.sessions


@criterion(6)
def test_session_expiry():
    """Session expiry: present at +240 s, gone at +241 s; three other timeouts honoured."""
    limit, present, after = _expiry_case(None)
    assert limit == 240 and present and not after
    for timeout in (30, 120, 900):
        limit, present, after = _expiry_case(timeout)
        assert limit == timeout and present and not after


@criterion(7)
def test_round_robin_fairness():
    """Round-robin: 10,000 connections over 3 backends differ by <= 1; with one failed, remaining two differ by <= 1."""
    cfg = BalancerConfig(vip="10.0.0.100", service_port=80, backends=("10.0.0.1", "10.0.0.2", "10.0.0.4"), honeypot="10.0.0.3")

    def spread(fail_b1):
        lb = Balancer(cfg, lambda payload: None, table_capacity=20_000)
        if fail_b1:
            for t in range(3):
                lb.health_tick({"b0": True, "b1": False, "b2": True}, float(t))
            assert lb.pool.healthy_ids() == ["b0", "b2"]
        counts = Counter()
        for i in range(10_000):
            src = pk.ip_to_int("192.0.2.0") + i // 50000
            seg = pk.TcpSegment(1024 + i, 80, 0, flags=pk.TcpFlag.SYN)
            (action,) = lb.ingest(pk.tcp_packet(src, cfg.vip_int, seg), 10.0)
            counts[action.backend] += 1
        return counts

    all_up = spread(False)
    assert set(all_up) == {"b0", "b1", "b2"} and max(all_up.values()) - min(all_up.values()) <= 1
    one_down = spread(True)
    assert set(one_down) == {"b0", "b2"} and max(one_down.values()) - min(one_down.values()) <= 1


@criterion(8)
def test_load_benchmark_shape(tmp_path):
    """Load benchmark: three rates at 300 s, < 60 s wall clock, CSV+SVG+text each, non-decreasing mean."""
    start = time.monotonic()
    reports = bench([3600, 14400, 18000], 300, tmp_path)
    elapsed = time.monotonic() - start
    assert elapsed < 60, f"{elapsed:.1f}s"
    for rate, report in zip(("3600", "14400", "18000"), reports):
        for ext in ("csv", "svg", "txt"):
            assert (tmp_path / f"rate_{rate}.{ext}").stat().st_size > 0
        assert report.completed == int(rate) * 300 // 3600
    means = [r.summary.mean_exact for r in reports]
    assert means[0] <= means[1] <= means[2], means


@criterion(9)
def test_honeypot_capture():
    """Honeypot capture: inbound equals post-detection bytes, outbound within budget, export/import bit-identical."""
    for seed in range(5):
        trace = scenario_reconnect_to_honeypot(seed)
        log = trace.captures
        assert log.bytes_from(ATT, Direction.INBOUND) == trace.post_detection_bytes(ATT)
        assert trace.post_detection_bytes(ATT)
        per_conn = Counter()
        for r in log:
            if r.direction is Direction.OUTBOUND:
                per_conn[(r.src_ip, r.src_port)] += len(r.data)
        assert per_conn and max(per_conn.values()) <= Topology().outbound_budget
        first = io.BytesIO()
        export_log(log, first)
        again = import_log(io.BytesIO(first.getvalue()))
        second = io.BytesIO()
        export_log(again, second)
        assert first.getvalue() == second.getvalue()
        assert again.records == log.records


@criterion(10)
def test_oracle_equivalences(db):
    """Oracles: inspect vs naive scan (10k), query over loopback (1k), checksum vs RFC-1071 (1k), report stats from CSV."""
    rng = random.Random(10)
    alphabet = b"abcd/ "
    for case in range(10_000):
        n = rng.randint(0, 6)
        patterns = list({bytes(rng.choice(alphabet) for _ in range(rng.randint(1, 4))) for _ in range(n)})
        sigs = [Signature(i + 1, f"s{i}", p) for i, p in enumerate(patterns)]
        payload = bytes(rng.choice(alphabet) for _ in range(rng.randint(0, 40)))
        assert inspect(SignatureDb(sigs), payload).matched == naive_matches([(s.id, s.pattern) for s in sigs], payload), case

    pieces = [*db.patterns(), b"GET /", b" HTTP/1.0\r\n", b"\x00\xff", b"a" * 50]
    with IdsServer(db, bind_listener("127.0.0.1", 0)) as server:
        for _ in range(1000):
            payload = b"".join(rng.choice(pieces) for _ in range(rng.randint(0, 5)))
            assert query(server.address, payload) == inspect(db, payload)
        assert server.queries == 1000

    for _ in range(1000):
        src, dst = rng.getrandbits(32), rng.getrandbits(32)
        seg = pk.TcpSegment(
            rng.getrandbits(16), rng.getrandbits(16), rng.getrandbits(32), rng.getrandbits(32),
            pk.TcpFlag(rng.getrandbits(8)), payload=bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 99))),
            options=bytes(rng.getrandbits(8) for _ in range(4 * rng.randint(0, 3))),
        )
        assert pk.tcp_checksum(seg, src, dst) == tcp_checksum_oracle(src, dst, pk.encode_tcp(seg))
        hdr = pk.serialize_ipv4(pk.IpPacket(src, dst, 6, b"x", identification=rng.getrandbits(16)))
        assert rfc1071_checksum(hdr[:20]) == 0

    for report in (run_scenario(LoadScenario(18000, 300, seed=1)), LatencyReport([(0, 0, 7)]), LatencyReport()):
        text = to_csv(report)
        ref = stats_from_csv(text)
        s = read_csv(text).summary
        assert (s.count, s.total_ms, s.min_ms, s.median_ms, s.p95_ms, s.max_ms) == (
            ref["count"], ref["total"], ref["min"], ref["median"], ref["p95"], ref["max"],
        )
        assert s == report.summary
