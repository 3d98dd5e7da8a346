"""Simulated load runs and response-time reports."""

from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .ids import SignatureDb, default_signatures
from .simnet import (
    BenignRequest,
    Reconnect,
    SimTrace,
    Topology,
    TrafficScript,
    benign_request,
    random_attack,
    run,
)

CSV_HEADER = ("request_index", "start_ms", "latency_ms")
DRAIN_MS = 5000
BUCKET_MS = 60_000


@dataclass(frozen=True)
class LoadScenario:
    rate: float  # pages per hour
    duration: float  # simulated seconds
    attacker_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rate < 0:
            raise ValueError("rate must be non-negative")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 0.0 <= self.attacker_fraction <= 1.0:
            raise ValueError("attacker_fraction must lie in [0, 1]")

    @property
    def requests(self) -> int:
        return int(self.rate * self.duration // 3600)


@dataclass(frozen=True)
class Summary:
    count: int
    total_ms: int
    min_ms: int
    median_ms: int
    p95_ms: int
    max_ms: int

    @property
    def mean_ms(self) -> float:
        return self.total_ms / self.count if self.count else 0.0

    @property
    def mean_exact(self) -> Fraction:
        return Fraction(self.total_ms, self.count) if self.count else Fraction(0)


def nearest_rank(sorted_values: Sequence[int], q: Fraction) -> int:
    """Nearest-rank quantile: the smallest value with at least ``q`` of the data at or below it."""
    if not sorted_values:
        return 0
    rank = max(1, math.ceil(Fraction(q) * len(sorted_values)))
    return sorted_values[rank - 1]


def summarize(latencies: Iterable[int]) -> Summary:
    values = sorted(latencies)
    if not values:
        return Summary(0, 0, 0, 0, 0, 0)
    return Summary(
        count=len(values),
        total_ms=sum(values),
        min_ms=values[0],
        median_ms=nearest_rank(values, Fraction(1, 2)),
        p95_ms=nearest_rank(values, Fraction(95, 100)),
        max_ms=values[-1],
    )


@dataclass
class LatencyReport:
    rows: list[tuple[int, int, int]] = field(default_factory=list)  # (index, start_ms, latency_ms)
    label: str = ""

    @property
    def completed(self) -> int:
        return len(self.rows)

    @property
    def latencies(self) -> list[int]:
        return [r[2] for r in self.rows]

    @property
    def summary(self) -> Summary:
        return summarize(self.latencies)

    def timeline(self, bucket_ms: int = BUCKET_MS) -> list[tuple[int, float]]:
        """Mean latency per bucket of request start time, as ``(bucket start ms, mean)``."""
        buckets: dict[int, list[int]] = {}
        for _, start, latency in self.rows:
            buckets.setdefault(start // bucket_ms * bucket_ms, []).append(latency)
        return [(b, sum(v) / len(v)) for b, v in sorted(buckets.items())]


def _arrivals(s: LoadScenario, rng: random.Random) -> list[int]:
    """One arrival per slot of ``3600/rate`` seconds, offset by exponential jitter.

    The jitter draws do not depend on the rate, so raising the rate under a
    fixed seed compresses the same arrival pattern.
    """
    n = s.requests
    if n == 0:
        return []
    period_ms = 3_600_000 / s.rate
    jitter = [min(rng.expovariate(2.0), 0.999) for _ in range(n)]
    return [int((i + jitter[i]) * period_ms) for i in range(n)]


def build_scripts(s: LoadScenario, db: SignatureDb) -> list[tuple[str, TrafficScript]]:
    rng = random.Random(s.seed)
    scripts: list[tuple[str, TrafficScript]] = []
    for i, at in enumerate(_arrivals(s, rng)):
        client = f"10.{1 + (i >> 16) % 200}.{(i >> 8) & 0xFF}.{i & 0xFF or 1}"
        scripts.append((client, BenignRequest(benign_request(f"/page{i % 97}.html"), start_ms=at)))
    n_attackers = round(s.requests * s.attacker_fraction)
    attack_rng = random.Random(s.seed ^ 0x5EED)
    horizon = max(1, int(s.duration * 1000))
    for j in range(n_attackers):
        ip = f"203.0.{113 + (j >> 8) % 10}.{j & 0xFF or 1}"
        scripts.append(
            (ip, Reconnect(random_attack(attack_rng, db), followups=(b"GET / HTTP/1.0\r\n\r\n",), start_ms=attack_rng.randrange(horizon)))
        )
    scripts.sort(key=lambda item: item[1].start_ms)
    return scripts


def report_from_trace(trace: SimTrace, benign_clients: set[int] | None = None, label: str = "") -> LatencyReport:
    completions = sorted(trace.completions, key=lambda c: (c.start_ms, c.request_id))
    if benign_clients is not None:
        completions = [c for c in completions if c.client in benign_clients]
    return LatencyReport([(i, c.start_ms, c.latency_ms) for i, c in enumerate(completions)], label)


def run_scenario(s: LoadScenario, topology: Topology | None = None, db: SignatureDb | None = None) -> LatencyReport:
    topology = topology or Topology()
    db = db or default_signatures()
    label = f"{s.rate:g} pages/hour"
    if s.requests == 0:
        return LatencyReport([], label)
    scripts = build_scripts(s, db)
    until = int(s.duration * 1000) + DRAIN_MS
    trace = run(topology, scripts, s.seed, until=until, db=db, record_events=False)
    from .packet import ip_to_int

    benign = {ip_to_int(ip) for ip, script in scripts if isinstance(script, BenignRequest)}
    return report_from_trace(trace, benign, label)


# -- output --------------------------------------------------------------------


def to_csv(report: LatencyReport) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(report.rows)
    return out.getvalue()


def read_csv(text: str, label: str = "") -> LatencyReport:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {header!r}")
    return LatencyReport([(int(a), int(b), int(c)) for a, b, c in reader], label)


def to_text(report: LatencyReport) -> str:
    s = report.summary
    lines = [
        f"report: {report.label or 'unnamed'}",
        f"completed: {report.completed}",
        f"min_ms: {s.min_ms}",
        f"median_ms: {s.median_ms}",
        f"mean_ms: {s.mean_ms:.3f}",
        f"p95_ms: {s.p95_ms}",
        f"max_ms: {s.max_ms}",
        f"total_ms: {s.total_ms}",
    ]
    return "\n".join(lines) + "\n"


def to_svg(reports: Sequence[LatencyReport], width: int = 640, height: int = 320) -> str:
    """Per-minute mean response time for one or more reports, as a standalone SVG."""
    pad = 40
    series = [(r.label, r.timeline()) for r in reports]
    xs = [x for _, pts in series for x, _ in pts] or [0]
    ys = [y for _, pts in series for _, y in pts] or [0.0]
    x_max = max(max(xs), 1)
    y_max = max(max(ys), 1.0) * 1.1
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]

    def sx(x: float) -> float:
        return pad + (width - 2 * pad) * x / x_max

    def sy(y: float) -> float:
        return height - pad - (height - 2 * pad) * y / y_max

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">minute of run</text>',
        f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})" text-anchor="middle">mean response (ms)</text>',
        f'<text x="{pad - 4}" y="{sy(0):.1f}" text-anchor="end" font-size="10">0</text>',
        f'<text x="{pad - 4}" y="{sy(y_max / 1.1):.1f}" text-anchor="end" font-size="10">{y_max / 1.1:.1f}</text>',
    ]
    for i, (label, pts) in enumerate(series):
        color = colors[i % len(colors)]
        if pts:
            coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report: LatencyReport, fmt: str, path: str | Path) -> Path:
    path = Path(path)
    if fmt == "csv":
        body = to_csv(report)
    elif fmt == "svg-plot":
        body = to_svg([report])
    elif fmt == "text":
        body = to_text(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path.write_text(body, encoding="utf-8")
    return path


def emit_all(report: LatencyReport, out_dir: str | Path, stem: str) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [
        emit_report(report, "csv", out / f"{stem}.csv"),
        emit_report(report, "svg-plot", out / f"{stem}.svg"),
        emit_report(report, "text", out / f"{stem}.txt"),
    ]


def bench(
    rates: Sequence[float],
    duration: float,
    out_dir: str | Path,
    seed: int = 0,
    attacker_fraction: float = 0.0,
    topology: Topology | None = None,
) -> list[LatencyReport]:
    """Run one scenario per rate, write CSV/SVG/text per rate plus a comparison SVG."""
    db = default_signatures()
    reports = []
    out = Path(out_dir)
    for rate in rates:
        report = run_scenario(LoadScenario(rate, duration, attacker_fraction, seed), topology, db)
        emit_all(report, out, f"rate_{rate:g}")
        reports.append(report)
    (out / "comparison.svg").write_text(to_svg(reports), encoding="utf-8")
    return reports
