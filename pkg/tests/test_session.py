import io
import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from securedirect import packet as pk
from securedirect.session import (
    DUPLICATE_SEQ,
    FRAG_EVASION,
    AttackerRegistry,
    ClockError,
    Consistency,
    FlagReason,
    SessionEntry,
    SessionTable,
    TableFull,
    read_attacker_report,
    record_segment,
    signature_match,
)

from .oracles import live_sessions


def key(n: int) -> pk.FiveTuple:
    return pk.FiveTuple(0xC0000200 + n, 0x0A000064, 40000 + n, 80)


def seg(seq, payload):
    return pk.TcpSegment(40000, 80, seq, flags=pk.TcpFlag.ACK | pk.TcpFlag.PSH, payload=payload)


def test_new_connections_rotate_and_existing_keep_backend():
    cursor = itertools.cycle(["b0", "b1"])
    table = SessionTable()
    a = table.lookup_or_admit(key(1), 0.0, lambda: next(cursor))
    b = table.lookup_or_admit(key(2), 0.0, lambda: next(cursor))
    assert a.backend != b.backend
    again = table.lookup_or_admit(key(1), 1.0, lambda: next(cursor))
    assert again is a and again.backend == "b0" and again.last_seen == 1.0


def test_table_full():
    table = SessionTable(capacity=2)
    table.lookup_or_admit(key(1), 0, lambda: "b0")
    table.lookup_or_admit(key(2), 0, lambda: "b0")
    with pytest.raises(TableFull):
        table.lookup_or_admit(key(3), 0, lambda: "b0")
    # existing keys still work at capacity
    assert table.lookup_or_admit(key(1), 0, lambda: "b1").backend == "b0"


def test_expiry_boundary_default_timeout():
    table = SessionTable()
    table.lookup_or_admit(key(1), 0.0, lambda: "b0")
    assert table.expire(240.0) == []
    assert key(1) in table
    assert table.expire(241.0) == [key(1)]
    assert key(1) not in table


@pytest.mark.parametrize("timeout", [1.0, 30.0, 600.0])
def test_expiry_other_timeouts(timeout):
    table = SessionTable(session_timeout=timeout)
    table.lookup_or_admit(key(1), 5.0, lambda: "b0")
    assert table.expire(5.0 + timeout) == []
    assert table.expire(5.0 + timeout + 1) == [key(1)]


def test_touch_resets_idle_timer():
    table = SessionTable()
    table.lookup_or_admit(key(1), 0.0, lambda: "b0")
    table.get(key(1), 200.0)
    assert table.expire(430.0) == []
    assert table.expire(441.0) == [key(1)]


@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 500)), max_size=40), st.integers(1, 300))
@settings(max_examples=200)
def test_expire_matches_brute_force(touches, timeout):
    table = SessionTable(session_timeout=timeout)
    last_seen = {}
    now = 0
    for k, dt in touches:
        now += dt
        table.lookup_or_admit(key(k), now, lambda: "b0")
        last_seen[key(k)] = now
    later = now + timeout // 2 + 1
    removed = set(table.expire(later))
    alive = live_sessions(last_seen, later, timeout)
    assert removed == set(last_seen) - alive
    assert {e.key for e in table.entries()} == alive


def test_clock_must_not_go_backwards():
    table = SessionTable()
    table.lookup_or_admit(key(1), 10.0, lambda: "b0")
    with pytest.raises(ClockError):
        table.get(key(1), 9.0)
    with pytest.raises(ClockError):
        table.expire(5.0)


def test_record_segment_examples():
    entry = SessionEntry(key(1), "b0", 0.0)
    assert record_segment(entry, seg(1000, b"AAAA")) is Consistency.FRESH
    assert record_segment(entry, seg(1000, b"AAAA")) is Consistency.EXACT_RETRANSMIT
    assert record_segment(entry, seg(1000, b"BBBB")) is Consistency.INCONSISTENT
    assert record_segment(entry, seg(1004, b"CCCC")) is Consistency.FRESH


def test_length_difference_is_inconsistent():
    entry = SessionEntry(key(1), "b0", 0.0)
    record_segment(entry, seg(7, b"AAAA"))
    assert record_segment(entry, seg(7, b"AAAA\0")) is Consistency.INCONSISTENT


def test_empty_payload_not_tracked():
    entry = SessionEntry(key(1), "b0", 0.0)
    assert record_segment(entry, seg(1000, b"")) is Consistency.FRESH
    assert record_segment(entry, seg(1000, b"GET /")) is Consistency.FRESH
    assert len(entry.seq_digests) == 1


def test_tracking_window_evicts_oldest():
    entry = SessionEntry(key(1), "b0", 0.0, max_tracked_segments=4)
    for i in range(5):
        record_segment(entry, seg(i * 10, b"x"))
    assert list(entry.seq_digests) == [10, 20, 30, 40]
    assert record_segment(entry, seg(0, b"y")) is Consistency.FRESH


@given(st.lists(st.tuples(st.integers(0, 3), st.sampled_from([b"A", b"B", b"AB", b"BA"])), max_size=20))
@settings(max_examples=300)
def test_inconsistent_iff_pairwise_disagreement(log):
    entry = SessionEntry(key(1), "b0", 0.0)
    reported = [record_segment(entry, seg(s, p)) for s, p in log]
    pairwise = any(s1 == s2 and p1 != p2 for (s1, p1), (s2, p2) in itertools.combinations(log, 2))
    assert (Consistency.INCONSISTENT in reported) == pairwise


def test_registry_basics():
    reg = AttackerRegistry()
    ip = pk.ip_to_int("198.51.100.7")
    assert not reg.is_flagged(ip, 0)
    reg.flag(ip, signature_match([7, 9]), 5.0)
    assert reg.is_flagged(ip, 5.0)
    first = reg.flag(ip, DUPLICATE_SEQ, 9.0)
    assert first.reason == signature_match([7, 9]) and first.flagged_at == 5.0
    assert reg.is_flagged(ip, 10**9)


def test_registry_ttl():
    reg = AttackerRegistry(ttl=3600)
    reg.flag(1, FRAG_EVASION, 100.0)
    assert reg.is_flagged(1, 3700.0)
    assert not reg.is_flagged(1, 3701.0)
    assert reg.expire(3701.0) == [1]


def test_report_round_trip():
    reg = AttackerRegistry()
    reg.flag(pk.ip_to_int("198.51.100.7"), signature_match([7, 9]), 1.5)
    reg.flag(pk.ip_to_int("203.0.113.1"), DUPLICATE_SEQ, 2.0)
    reg.flag(pk.ip_to_int("203.0.113.2"), FRAG_EVASION, 3.0)
    sink = io.StringIO()
    assert reg.export(sink) == 3
    assert sink.getvalue().splitlines() == [
        "198.51.100.7 signature:7,9 1.5",
        "203.0.113.1 duplicate-seq 2",
        "203.0.113.2 frag-evasion 3",
    ]
    assert tuple(read_attacker_report(io.StringIO(sink.getvalue()))) == reg.snapshot()


def test_reason_parse():
    for reason in (signature_match([3]), DUPLICATE_SEQ, FRAG_EVASION):
        assert FlagReason.parse(str(reason)) == reason
