"""Metric accumulation and post-run analysis of a simulation."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import NamedTuple

DIVERT_FRACTION = 0.2
RECOVER_FRACTION = 0.8


class QueryRecord(NamedTuple):
    qid: int
    workload: str
    arrival: int  # tick
    done: int  # tick the response reached the broker
    status: str
    servers: tuple[str, ...]


@dataclass
class WorkloadWindow:
    admissions: int = 0
    rejections: int = 0
    cancellations: int = 0
    kills: int = 0
    charged_cpu: float = 0.0
    charged_mem: float = 0.0
    true_cpu: float = 0.0
    true_mem: float = 0.0


def nearest_rank(values: list[float], q: float) -> float | None:
    """Nearest-rank percentile (``q`` in (0, 100]) of ``values``."""
    if not values:
        return None
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return ordered[rank - 1]


@dataclass
class MetricsSeries:
    window_ms: float
    tick_ms: float
    servers: list[str]
    rows: list[list[str]]
    fair_share_qps: float
    events: list[dict] = field(default_factory=list)
    dispatch: dict[int, list[int]] = field(default_factory=dict)
    queries: list[QueryRecord] = field(default_factory=list)
    arrivals: list[tuple[int, str, int]] = field(default_factory=list)
    budget_windows: dict[tuple[int, str], WorkloadWindow] = field(default_factory=dict)
    budget_window_ms: float | None = None
    sub_usage: list[tuple[str, str, float, float]] = field(default_factory=list)
    accounted: dict[tuple[str, str], tuple[float, float]] = field(default_factory=dict)
    census: dict[str, int] = field(default_factory=dict)
    rebalance_trace: list[dict] = field(default_factory=list)
    rebalance_audit: dict = field(default_factory=dict)
    duration_ticks: int = 0

    def __post_init__(self) -> None:
        self._window_ticks = max(1, int(round(self.window_ms / self.tick_ms)))
        self._index = {s: k for k, s in enumerate(self.servers)}

    # accumulation -------------------------------------------------------

    def window_of(self, tick: int) -> int:
        return tick // self._window_ticks

    def count_dispatch(self, window: int, server: str) -> None:
        counts = self.dispatch.get(window)
        if counts is None:
            counts = self.dispatch[window] = [0] * len(self.servers)
        counts[self._index[server]] += 1

    def workload_window(self, window: int, workload: str) -> WorkloadWindow:
        key = (window, workload)
        ww = self.budget_windows.get(key)
        if ww is None:
            ww = self.budget_windows[key] = WorkloadWindow()
        return ww

    # views --------------------------------------------------------------

    @property
    def num_windows(self) -> int:
        return math.ceil(self.duration_ticks / self._window_ticks) if self.duration_ticks else 0

    def window_start_ms(self, window: int) -> float:
        return window * self._window_ticks * self.tick_ms

    def server_counts(self, server: str) -> list[int]:
        k = self._index[server]
        return [self.dispatch.get(w, [0] * len(self.servers))[k] for w in range(self.num_windows)]

    def server_qps(self, server: str) -> list[float]:
        scale = 1000.0 / (self._window_ticks * self.tick_ms)
        return [c * scale for c in self.server_counts(server)]

    def latency_ms(self, q: QueryRecord) -> float:
        return (q.done - q.arrival) * self.tick_ms

    def completed(self) -> list[QueryRecord]:
        return [q for q in self.queries if q.status == "completed"]

    def completed_per_window(self) -> list[int]:
        out = [0] * self.num_windows
        for q in self.queries:
            if q.status == "completed":
                out[self.window_of(q.done)] += 1
        return out

    def latency_percentiles(self, window: int | None = None) -> dict[str, float | None]:
        lat = [self.latency_ms(q) for q in self.queries
               if q.status == "completed" and (window is None or self.window_of(q.done) == window)]
        return {f"p{p}": nearest_rank(lat, p) for p in (50, 90, 95, 99)}

    def rows_tsv(self) -> list[tuple[float, str, str, float]]:
        """Long-format series: (window start ms, key, metric, value)."""
        out = []
        scale = 1000.0 / (self._window_ticks * self.tick_ms)
        per_window: dict[int, list[float]] = {}
        for q in self.queries:
            if q.status == "completed":
                per_window.setdefault(self.window_of(q.done), []).append(self.latency_ms(q))
        for w in range(self.num_windows):
            start = self.window_start_ms(w)
            counts = self.dispatch.get(w, [0] * len(self.servers))
            for s, c in zip(self.servers, counts):
                out.append((start, s, "qps", c * scale))
                if self.fair_share_qps > 0:
                    out.append((start, s, "relative_qps", c * scale / self.fair_share_qps))
            lat = per_window.get(w, [])
            out.append((start, "broker", "completed", float(len(lat))))
            for p in (50, 90, 95, 99):
                v = nearest_rank(lat, p)
                if v is not None:
                    out.append((start, "broker", f"latency_p{p}_ms", v))
        if self.budget_window_ms:
            for (w, label), ww in sorted(self.budget_windows.items()):
                start = w * self.budget_window_ms
                for name in ("admissions", "rejections", "cancellations", "kills",
                             "charged_cpu", "charged_mem", "true_cpu", "true_mem"):
                    out.append((start, label, name, float(getattr(ww, name))))
        return out


@dataclass(frozen=True)
class DiversionResult:
    diversion_windows: int | None
    diversion_ms: float | None
    recovery_ms: float | None
    oscillation_index: float | None

    def to_record(self) -> dict:
        return {
            "diversion_windows": self.diversion_windows,
            "diversion_ms": self.diversion_ms,
            "recovery_ms": self.recovery_ms,
            "oscillation_index": self.oscillation_index,
        }


def _single_event(series: MetricsSeries, server: str | None) -> dict:
    events = [e for e in series.events if server is None or e["server"] == server]
    if len(events) != 1:
        raise ValueError(f"expected exactly one degradation event, found {len(events)}")
    return events[0]


def measure_diversion(series: MetricsSeries, degraded_server: str,
                      fair_share: float | None = None) -> DiversionResult:
    """Diversion and recovery of one degraded server, plus healthy-server churn.

    ``diversion_windows`` counts windows from the one holding the start of
    degradation up to and including the first whose QPS is below 20% of fair
    share (1 = diverted within the first window). ``recovery_ms`` is measured
    from the end of degradation to the end of the first window, at or after
    it, back at 80% of fair share. Windows straddling a boundary are skipped
    for recovery so a partially healthy window cannot count.
    """
    ev = _single_event(series, degraded_server)
    fair = series.fair_share_qps if fair_share is None else fair_share
    qps = series.server_qps(degraded_server)
    wms = series._window_ticks * series.tick_ms
    first = int(ev["start_ms"] // wms)
    last = int(math.ceil(ev["end_ms"] / wms))  # first window starting at/after restoration

    diversion = None
    for w in range(first, min(last, len(qps))):
        if qps[w] < DIVERT_FRACTION * fair:
            diversion = w - first + 1
            break

    recovery = None
    for w in range(last, len(qps) if diversion is not None else 0):
        if qps[w] >= RECOVER_FRACTION * fair:
            recovery = series.window_start_ms(w) + wms - ev["end_ms"]
            break

    healthy = [s for row in series.rows if degraded_server in row for s in row if s != degraded_server]
    stds = []
    if fair > 0 and len(healthy) > 1:
        per_server = [series.server_qps(s) for s in healthy]
        for w in range(first, min(last, len(qps))):
            shares = [v[w] / fair for v in per_server]
            stds.append(statistics.pstdev(shares))
    osc = statistics.fmean(stds) if stds else None
    return DiversionResult(
        diversion, None if diversion is None else diversion * wms, recovery, osc
    )


def healthy_latency_ms(series: MetricsSeries) -> float | None:
    """Median latency of completed queries that did not overlap any degradation."""
    spans = [(e["start_ms"], e["end_ms"]) for e in series.events]
    lat = []
    for q in series.queries:
        if q.status != "completed":
            continue
        a, d = q.arrival * series.tick_ms, q.done * series.tick_ms
        if all(d <= s or a >= e for s, e in spans):
            lat.append(d - a)
    return nearest_rank(lat, 50)


def measure_degradation_prevention(series: MetricsSeries, latency_threshold: float = 1.5,
                                   baseline_ms: float | None = None) -> float:
    """Fraction of queries arriving during degradation that stayed under threshold.

    ``latency_threshold`` is a multiple of healthy-mode latency, taken as the
    median latency outside degradation unless ``baseline_ms`` is given.
    Queries that did not complete count as degraded.
    """
    if not series.events:
        return 1.0
    base = healthy_latency_ms(series) if baseline_ms is None else baseline_ms
    if base is None:
        raise ValueError("no healthy-mode queries to derive a latency baseline from")
    limit = latency_threshold * base
    spans = [(e["start_ms"], e["end_ms"]) for e in series.events]
    total = ok = 0
    for q in series.queries:
        a = q.arrival * series.tick_ms
        if not any(s <= a < e for s, e in spans):
            continue
        total += 1
        if q.status == "completed" and series.latency_ms(q) < limit:
            ok += 1
    return ok / total if total else 1.0
