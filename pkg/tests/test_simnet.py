import random
import re

import pytest

from securedirect import packet as pk
from securedirect.balancer import ForwardToBackend
from securedirect.session import Reason
from securedirect.simnet import (
    ATTACKER,
    BENIGN_CLIENT,
    HONEYPOT,
    BenignRequest,
    DuplicateSeqEvasion,
    ExploitDirect,
    FragEvasion,
    ScheduleOverflow,
    Topology,
    benign_request,
    clean_fragment_plan,
    conflicting_fragment_plan,
    mixed_scripts,
    run,
    scenario_baseline,
    scenario_duplicate_seq,
    scenario_frag_evasion,
    scenario_mixed,
    scenario_reconnect_to_honeypot,
    signature_hits,
    summarize,
)

ATT = pk.ip_to_int(ATTACKER)


def test_default_topology_is_three_servers_four_addresses():
    t = Topology()
    assert len(t.backends) == 2
    assert len({t.vip, t.honeypot, *t.backends}) == 4
    with pytest.raises(ValueError):
        Topology(backends=("10.0.0.1",))


def test_single_benign_request():
    trace = run(Topology(), [(BENIGN_CLIENT, BenignRequest(benign_request()))], seed=1)
    assert len(trace.completions) == 1
    assert trace.completions[0].server in ("b0", "b1")
    assert trace.backend_log(trace.completions[0].server) == benign_request()


def test_determinism():
    a = scenario_mixed(17)
    b = scenario_mixed(17)
    assert a.export() == b.export()
    assert a.export() != scenario_mixed(18).export()


def _hops(trace):
    sends, recvs = {}, {}
    for at, kind, detail in trace.events:
        m = re.match(r"pid=(\d+)", detail)
        if kind == "send":
            sends[int(m.group(1))] = at
        elif kind == "recv":
            recvs[int(m.group(1))] = at
    return sends, recvs


@pytest.mark.parametrize("link, ids_ms, service", [(1, 2, 5), (3, 7, 11), (0, 0, 0)])
def test_latency_recomputed_from_event_log(link, ids_ms, service):
    topo = Topology(link_latency_ms=link, ids_latency_ms=ids_ms, backend_service_ms=service)
    trace = run(topo, [(BENIGN_CLIENT, BenignRequest(benign_request()))], seed=0)
    sends, recvs = _hops(trace)
    # every link traversal in the log takes exactly the configured latency
    assert all(recvs[p] - sends[p] == link for p in recvs)
    # critical path: SYN out and SYN-ACK back (3 links), request out and page back
    # (3 links), one IDS query, one service time
    assert trace.completions[0].latency_ms == 6 * link + ids_ms + service


def test_link_overrides_and_loss():
    topo = Topology(latency_overrides=((f"client:{BENIGN_CLIENT}", "balancer", 10),))
    trace = run(topo, [(BENIGN_CLIENT, BenignRequest(benign_request()))])
    assert trace.completions[0].latency_ms == 13 + 2 * 9
    lossy = Topology(loss=((f"client:{BENIGN_CLIENT}", "balancer", 1.0),))
    trace = run(lossy, [(BENIGN_CLIENT, BenignRequest(benign_request()))])
    assert trace.completions == [] and set(trace.conservation()) == {"lost"}


def test_events_never_scheduled_in_the_past():
    trace = scenario_mixed(3)
    times = [at for at, _, _ in trace.events]
    assert times == sorted(times)


def test_schedule_overflow():
    with pytest.raises(ScheduleOverflow):
        run(Topology(), [(BENIGN_CLIENT, BenignRequest(benign_request()))], max_events=5)


def test_duplicate_seq_scenario(db):
    trace = scenario_duplicate_seq(0)
    rec = trace.flagged()[ATT]
    assert rec.reason.kind is Reason.DUPLICATE_SEQ
    assert len(trace.rst) == 1 and trace.rst[0][3]
    attack = b"GET /cgi-bin/x?" + db.signatures[0].pattern
    assert all(attack not in s for s in trace.production_bytes())
    assert signature_hits(db, trace.production_bytes()) == []
    # the attacker's follow-up request lands at the honeypot
    assert b"/after.html" in trace.captures.bytes_from(ATT)


def test_duplicate_seq_identical_control():
    trace = scenario_duplicate_seq(0, identical=True)
    assert trace.attackers == ()
    assert trace.rst == []


def test_frag_evasion_scenario(db):
    trace = scenario_frag_evasion(0)
    assert trace.flagged()[ATT].reason.kind is Reason.FRAG_EVASION
    assert len(trace.captures) > 0
    assert signature_hits(db, trace.production_bytes()) == []
    benign = [c for c in trace.completions if c.client == pk.ip_to_int(BENIGN_CLIENT)]
    assert len(benign) == 1 and benign[0].server != HONEYPOT
    assert trace.backend_log(benign[0].server) == benign_request("/fragmented.html")


def test_clean_fragmentation_is_transparent():
    request = benign_request("/some/long/path/to/a/page.html")
    total = pk.TCP_HEADER_LEN + len(request)
    plain = run(Topology(), [(BENIGN_CLIENT, BenignRequest(request))], seed=4)
    cuts = tuple(c for c, _, _ in sorted(clean_fragment_plan(total, random.Random(1))) if c)
    fragged = run(Topology(), [(BENIGN_CLIENT, BenignRequest(request, fragment_cuts=cuts))], seed=4)
    assert cuts
    assert plain.backend_streams == fragged.backend_streams
    assert plain.backend_log("b0") == request


def test_reconnect_scenario():
    trace = scenario_reconnect_to_honeypot(0)
    assert ATT in trace.flagged()
    assert any(node == HONEYPOT for (ip, _), node in trace.synack_from.items() if ip == ATT)
    assert trace.captures.bytes_from(ATT) == trace.post_detection_bytes(ATT)
    assert trace.queries_after_flag[ATT] == 0


def test_baseline_all_production():
    trace = scenario_baseline(0)
    assert len(trace.completions) == 10
    assert all(c.server != HONEYPOT for c in trace.completions)
    assert "attackers flagged: 0" in summarize(trace)


def test_conservation():
    for seed in range(20):
        trace = scenario_mixed(seed)
        outcome = trace.conservation()
        assert sum(outcome.values()) == len(trace.injected)
        assert set(outcome) <= {"backend", "honeypot", "dropped", "lost", "buffered", "in-flight"}


def test_ids_disabled_is_fail_closed(db):
    trace = run(Topology(ids_enabled=False), mixed_scripts(5, db), seed=5)
    for _, _, action in trace.actions:
        if isinstance(action, ForwardToBackend):
            assert pk.parse_tcp(action.packet).payload == b""
    assert trace.completions == []


def test_backend_outage_removes_backend():
    topo = Topology(backend_down=(("b0", 0, 60_000),))
    scripts = [(f"192.0.2.{i % 200 + 1}", BenignRequest(benign_request(), start_ms=20_000 + i * 10)) for i in range(20)]
    trace = run(topo, scripts, seed=0, until=30_000)
    assert {c.server for c in trace.completions} == {"b1"}
    assert len(trace.completions) == 20


def test_exploit_direct_and_conflicting_plan(db):
    rng = random.Random(0)
    benign = benign_request("/abcdefgh")
    attack = (db.signatures[1].pattern * 10)[: len(benign)]
    plan = conflicting_fragment_plan(benign, attack, rng)
    scripts = [
        (ATTACKER, FragEvasion(benign, plan, alt_payload=attack)),
        ("198.51.100.1", ExploitDirect(b"GET /bin/sh", 3)),
        ("198.51.100.2", DuplicateSeqEvasion(benign, attack, 4)),
    ]
    trace = run(Topology(), scripts)
    assert len(trace.attackers) == 3
    assert signature_hits(db, trace.production_bytes()) == []


@pytest.mark.parametrize("where", [0, -1])
def test_conflicting_plan_is_fragmented_wherever_the_difference_lies(where):
    payload = benign_request("/x.html")
    alt = bytearray(payload)
    alt[where] ^= 0x20
    plan = conflicting_fragment_plan(payload, bytes(alt), random.Random(3))
    assert all(not (lo == 0 and hi == pk.TCP_HEADER_LEN + len(payload)) for lo, hi, _ in plan)
    trace = run(Topology(), [(ATTACKER, FragEvasion(payload, plan, alt_payload=bytes(alt)))], seed=0, until=500)
    assert trace.flagged()[ATT].reason.kind is Reason.FRAG_EVASION
    assert all(s == b"" for per in trace.backend_streams.values() for s in per.values())
