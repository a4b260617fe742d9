"""Discrete-time broker/server simulator.

Time advances in fixed ticks. Tick ``k`` covers ``[k, k+1)`` and runs:

1. responses due at ``k`` reach their brokers (stats update, latency record);
2. queries arriving at ``k`` are spread round-robin over brokers, which pick
   one server per mirrored server set and send the sub-query;
3. sub-queries due at ``k`` reach their servers (admission, chunking);
4. every busy server thread advances its chunk by one work unit (a degraded
   server's threads only with probability ``p``); budget enforcement and the
   sampling accountant run on their own intervals.

A message sent at the start of tick ``k`` is delivered at ``k + delay``; a
reply to work finished during tick ``k`` leaves at ``k + 1`` and lands at
``k + 1 + delay``.

Randomness comes from named streams derived from the scenario seed, so
arrivals, degradation draws, work jitter and softmax draws never perturb
each other: two policies run with the same seed see the same arrivals.
"""

from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import dataclass, field

from ..budget.accounting import SampleAccountant, ThreadSlot, kill_policy
from ..budget.config import HostInfo, propagate_budgets
from ..budget.ledger import BudgetLedger, Resource, admit_query
from ..rebalance import StepCosts, replay, run_rebalance
from ..selector import NoEligibleServer, ServerSelector
from .metrics import MetricsSeries, QueryRecord, WorkloadWindow
from .scenario import Scenario, server_id

NS_PER_MS = 1_000_000


def stream(seed: int, name: str) -> random.Random:
    return random.Random(f"{seed}/{name}")


class _Query:
    __slots__ = ("qid", "profile", "broker", "arrival", "pending", "status", "servers")

    def __init__(self, qid, profile, broker, arrival):
        self.qid = qid
        self.profile = profile
        self.broker = broker
        self.arrival = arrival
        self.pending = 0
        self.status = "completed"
        self.servers = []


class _Sub:
    __slots__ = ("query", "server", "sent", "chunks_left", "state", "reserved_cpu",
                 "reserved_mem", "true_cpu", "true_mem", "measured_cpu", "measured_mem",
                 "live_mem", "key")

    def __init__(self, query, server, sent):
        self.query = query
        self.server = server
        self.sent = sent
        self.chunks_left = 0
        self.state = "transit"
        self.reserved_cpu = 0.0
        self.reserved_mem = 0.0
        self.true_cpu = 0.0
        self.true_mem = 0.0
        self.measured_cpu = 0.0
        self.measured_mem = 0.0
        self.live_mem = 0.0
        self.key = f"q{query.qid}"


class _Chunk:
    __slots__ = ("sub", "remaining", "mem_per_unit", "task")

    def __init__(self, sub, remaining, mem_per_unit, task):
        self.sub = sub
        self.remaining = remaining
        self.mem_per_unit = mem_per_unit
        self.task = task


class _Thread:
    __slots__ = ("slot", "chunk", "pending")

    def __init__(self, tid):
        self.slot = ThreadSlot(tid)
        self.chunk = None
        self.pending = {}


class _Server:
    __slots__ = ("id", "index", "threads", "queue", "p", "ledger", "accountant", "busy",
                 "live_mem")

    def __init__(self, sid, index, nthreads):
        self.id = sid
        self.index = index
        self.threads = [_Thread(t) for t in range(nthreads)]
        self.queue = deque()
        self.p = 1.0
        self.ledger = None
        self.accountant = None
        self.busy = 0
        self.live_mem = 0.0


@dataclass
class _Rebalance:
    steps: list
    boundaries: list  # (start_tick, end_tick) per step
    assignment: dict
    initial: dict
    cursor: int = 0
    drained: frozenset = frozenset()
    min_serving: int = 10**9
    routed_to_drained: int = 0
    log: list = field(default_factory=list)


class Simulation:
    """Mutable simulation state; :meth:`tick` advances one step."""

    def __init__(self, scenario: Scenario):
        self.scenario = sc = scenario
        self.tick_ms = sc.sim.tick_ms
        self.clock = 0
        self.n_ticks = int(round(sc.sim.duration_ms / self.tick_ms))
        self.delay = sc.sim.message_delay_ticks
        topo = sc.topology

        self.rows = [[server_id(i, j) for j in range(topo.replicas)] for i in range(topo.mss_count)]
        ids = [s for row in self.rows for s in row]
        self.servers = {s: _Server(s, k, topo.threads_per_server) for k, s in enumerate(ids)}
        self.server_list = list(self.servers.values())

        policy = sc.policy.selection_policy()
        self.brokers = [ServerSelector(policy) for _ in range(topo.brokers)]
        tables = sorted(set(topo.tables) | {w.table for w in sc.workloads})
        for sel in self.brokers:
            for t in tables:
                for s in ids:
                    sel.register_server(t, s)
        self.routing = sc.policy.routing
        # idle-stat refresh is checked on a 10 ms grid
        self.sample_ticks_q = max(1, int(round(10.0 / self.tick_ms))) if sc.policy.queue_sample_ms > 0 or sc.policy.latency_decay_ms > 0 else 0
        self._rotation = [0] * topo.brokers
        self._next_broker = 0

        seed = sc.seed
        self.rng_arrivals = stream(seed, "arrivals")
        self.rng_degrade = stream(seed, "degradation")
        self.rng_work = stream(seed, "work")
        self.rng_route = stream(seed, "replica-group")
        self.rng_softmax = [stream(seed, f"softmax/{b}") for b in range(topo.brokers)]

        self.per_tick = [w.qps * self.tick_ms / 1000.0 for w in sc.workloads]
        self.accrued = [0.0] * len(sc.workloads)
        self.next_poisson = [self._poisson_gap(r) for r in self.per_tick] \
            if sc.sim.arrivals == "poisson" else None

        self.transitions: dict[int, list] = {}
        for ev in sc.events:
            start = int(round(ev.start_ms / self.tick_ms))
            end = int(round(ev.end_ms / self.tick_ms))
            self.transitions.setdefault(start, []).append((ev.server, ev.p))
            self.transitions.setdefault(end, []).append((ev.server, 1.0))

        self.to_servers: dict[int, list] = {}
        self.to_brokers: dict[int, list] = {}
        self.live: dict[int, _Query] = {}
        self.injected = 0
        self.completed = 0
        self.rejected = 0
        self._qid = 0
        self._task = 0

        self.window_ticks = max(1, int(round(sc.sim.window_ms / self.tick_ms)))
        self.series = MetricsSeries(
            window_ms=sc.sim.window_ms,
            tick_ms=self.tick_ms,
            servers=ids,
            rows=[list(r) for r in self.rows],
            fair_share_qps=self._fair_share(),
            events=[ev.model_dump() for ev in sc.events],
        )

        self._setup_budgets()
        self._setup_rebalance()
        self._groups = self._static_groups()

    # ------------------------------------------------------------------ setup

    def _fair_share(self) -> float:
        total = sum(w.qps for w in self.scenario.workloads)
        return total / self.scenario.topology.replicas

    def _poisson_gap(self, rate_per_tick: float) -> float:
        if rate_per_tick <= 0:
            return math.inf
        return self.rng_arrivals.expovariate(rate_per_tick)

    def _setup_budgets(self) -> None:
        b = self.scenario.budgets
        self.budgets = b
        if b is None:
            return
        self.acct_ticks = max(1, int(round(b.accounting_interval_ms / self.tick_ms)))
        self.sample_ticks = max(1, int(round(b.sampling_interval_ms / self.tick_ms)))
        self.budget_window_ticks = max(1, int(round(b.window_ms / self.tick_ms)))
        self.series.budget_window_ms = self.budget_window_ticks * self.tick_ms
        topo = {s: HostInfo("SERVER", frozenset(self.scenario.topology.tables) |
                            {w.table for w in self.scenario.workloads}) for s in self.servers}
        for srv in self.server_list:
            srv.ledger = BudgetLedger(srv.id, "SERVER", b.window_ms, strict=b.strict)
            srv.accountant = SampleAccountant()
        if b.enforce:
            for cfg in b.workloads:
                for host, (cpu, mem) in propagate_budgets(cfg, topo).budgets.items():
                    led = self.servers[host].ledger
                    led.set_budget(cfg.workload_name, Resource.CPU, cpu)
                    led.set_budget(cfg.workload_name, Resource.MEM, mem)
        self._history: dict[str, list[float]] = {}

    def _setup_rebalance(self) -> None:
        plan = self.scenario.rebalance
        self.rebalance = None
        if plan is None:
            return
        segs = self.scenario.sim.segments_per_mss
        initial = {}
        for i, row in enumerate(self.rows):
            owned = frozenset(f"seg{i}-{k}" for k in range(segs))
            for s in row:
                initial[s] = owned
        desired = {s: frozenset(plan.desired.get(s, ())) for s in self.servers}
        trace = run_rebalance(initial, desired, plan.threshold, plan.progress_batch,
                              costs=StepCosts(plan.drain_window_ms, plan.bytes_per_ms, {},
                                              plan.segment_bytes))
        t = int(round(plan.start_ms / self.tick_ms))
        bounds = []
        for step in trace.steps:
            dur = step.drain_ms + step.download_ms
            length = max(1, int(round(dur / self.tick_ms)))
            bounds.append((t, t + length))
            t += length
        self.rebalance = _Rebalance(trace.steps, bounds, dict(initial), initial)
        self.series.rebalance_trace = [s.to_record() for s in trace.steps]

    def _static_groups(self):
        if self.rebalance is None:
            return [list(r) for r in self.rows]
        return self._assignment_groups()

    def _assignment_groups(self):
        """Segments partitioned by the set of hosts currently holding them."""
        rb = self.rebalance
        holders: dict[str, list[str]] = {}
        for host in self.servers:
            for seg in rb.assignment.get(host, ()):
                holders.setdefault(seg, []).append(host)
        groups: dict[tuple, list[str]] = {}
        for seg, hs in holders.items():
            groups.setdefault(tuple(sorted(hs, key=lambda h: self.servers[h].index)), []).append(seg)
        for hs in groups:
            serving = sum(1 for h in hs if h not in rb.drained)
            rb.min_serving = min(rb.min_serving, serving)
        return [list(hs) for hs in sorted(groups)]

    # ------------------------------------------------------------------ phases

    def _advance_rebalance(self, now: int) -> None:
        rb = self.rebalance
        changed = False
        while rb.cursor < len(rb.steps):
            start, end = rb.boundaries[rb.cursor]
            step = rb.steps[rb.cursor]
            if now == start and step.action == "rebalance":
                rb.drained = frozenset(step.hosts)
                rb.log.append((now, "drain", step.hosts))
                changed = True
            if now >= end:
                rb.assignment = replay(rb.assignment, [step])
                rb.drained = frozenset()
                rb.log.append((now, "done", step.hosts))
                rb.cursor += 1
                changed = True
                continue
            break
        if changed:
            self._groups = self._assignment_groups()

    def _arrivals(self, now: int) -> None:
        workloads = self.scenario.workloads
        for w, rate in enumerate(self.per_tick):
            if self.next_poisson is None:
                self.accrued[w] += rate
                n = int(self.accrued[w])
                self.accrued[w] -= n
            else:
                n = 0
                while self.next_poisson[w] <= now + 1:
                    n += 1
                    self.next_poisson[w] += self._poisson_gap(rate)
            for _ in range(n):
                self._inject(workloads[w], now)

    def _inject(self, profile, now: int) -> None:
        qid = self._qid
        self._qid += 1
        b = self._next_broker
        self._next_broker = (b + 1) % len(self.brokers)
        q = _Query(qid, profile, b, now)
        self.injected += 1
        self.series.arrivals.append((now, profile.label, b))
        sel = self.brokers[b]
        table = profile.table
        drained = self.rebalance.drained if self.rebalance is not None else frozenset()
        if self.routing == "replica_group":
            ncols = len(self.rows[0])
            col = self.rng_route.randrange(ncols)
            targets = []
            for group in self._groups:
                pick = None
                for step in range(len(group)):
                    cand = group[(col + step) % len(group)]
                    if cand not in drained:
                        pick = cand
                        break
                targets.append(pick)
        else:
            rot = self._rotation[b]
            self._rotation[b] = rot + 1
            rotate = self.scenario.policy.scorer != "round_robin"
            targets = []
            for group in self._groups:
                k = rot % len(group) if rotate else 0
                ordered = group[k:] + group[:k]
                try:
                    targets.append(sel.select(table, ordered, self.rng_softmax[b], drained))
                except NoEligibleServer:
                    targets.append(None)
        if any(t is None for t in targets):
            q.status = "rejected"
            self.rejected += 1
            self.series.queries.append(QueryRecord(qid, profile.label, now, now, "rejected", ()))
            return
        self.live[qid] = q
        due = now + self.delay
        inbox = self.to_servers.setdefault(due, [])
        w = self.series.window_of(now)
        for sid in targets:
            if sid in drained and self.rebalance is not None:
                self.rebalance.routed_to_drained += 1
            sel.on_dispatch(table, sid, now * self.tick_ms)
            self.series.count_dispatch(w, sid)
            sub = _Sub(q, sid, now)
            q.pending += 1
            q.servers.append(sid)
            inbox.append(sub)

    def _receive(self, sub: _Sub, now: int) -> None:
        srv = self.servers[sub.server]
        profile = sub.query.profile
        cap = self.scenario.sim.queue_cap
        if cap is not None and len(srv.queue) >= cap:
            self._respond(sub, now + self.delay, "rejected")
            return
        b = self.budgets
        if b is not None and b.enforce and srv.ledger is not None:
            cpu, mem = self._provisional(profile.label)
            if not admit_query(srv.ledger, profile.label, cpu, mem, now * self.tick_ms):
                self.series.workload_window(self._bw(now), profile.label).rejections += 1
                self._respond(sub, now + self.delay, "rejected")
                return
            sub.reserved_cpu, sub.reserved_mem = cpu, mem
            ww = self.series.workload_window(self._bw(now), profile.label)
            ww.admissions += 1
            ww.charged_cpu += cpu
            ww.charged_mem += mem
        nthreads = len(srv.threads)
        segments = profile.segments or self.scenario.sim.segments_per_mss
        chunks = max(1, min(nthreads, segments))
        base = profile.base_latency_ms
        rw = self.rng_work
        sub.state = "queued"
        sub.chunks_left = chunks
        for _ in range(chunks):
            lat = base
            if profile.latency_jitter:
                lat *= 1.0 + profile.latency_jitter * (2.0 * rw.random() - 1.0)
            units = max(1, math.ceil(lat / self.tick_ms - 1e-9))
            mem = profile.mem_bytes_per_unit
            if profile.mem_jitter:
                mem *= 1.0 + profile.mem_jitter * (2.0 * rw.random() - 1.0)
            self._task += 1
            srv.queue.append(_Chunk(sub, units, mem, (sub.key, f"t{self._task}")))

    def _provisional(self, workload: str) -> tuple[float, float]:
        b = self.budgets
        cpu, mem = b.provisional_cpu_ns, b.provisional_mem_bytes
        hist = self._history.get(workload)
        if hist and hist[0] > 0:
            cpu = max(cpu, hist[1] / hist[0])
            mem = max(mem, hist[2] / hist[0])
        return cpu, mem

    def _bw(self, now: int) -> int:
        return now // self.budget_window_ticks

    def _respond(self, sub: _Sub, due: int, status: str) -> None:
        sub.state = status
        self.to_brokers.setdefault(due, []).append(sub)

    def _process(self, now: int) -> None:
        cpu_unit = self.tick_ms * NS_PER_MS
        budgets = self.budgets is not None
        for srv in self.server_list:
            if not srv.busy and not srv.queue:
                continue
            p = srv.p
            queue = srv.queue
            for th in srv.threads:
                ch = th.chunk
                if ch is None:
                    while queue and ch is None:
                        ch = queue.popleft()
                        if ch.sub.state not in ("queued", "running"):
                            ch = None
                    if ch is None:
                        continue
                    th.chunk = ch
                    th.slot.install(ch.task)
                    ch.sub.state = "running"
                    srv.busy += 1
                if p < 1.0 and self.rng_degrade.random() >= p:
                    continue
                ch.remaining -= 1
                sub = ch.sub
                mem = ch.mem_per_unit
                slot = th.slot.metric
                slot.cpu_ns += cpu_unit
                slot.mem_bytes += mem
                sub.true_cpu += cpu_unit
                sub.true_mem += mem
                if budgets:
                    srv.live_mem += mem
                    sub.live_mem += mem
                    acc = th.pending.get(sub)
                    if acc is None:
                        th.pending[sub] = [cpu_unit, mem]
                    else:
                        acc[0] += cpu_unit
                        acc[1] += mem
                    ww = self.series.workload_window(self._bw(now), sub.query.profile.label)
                    ww.true_cpu += cpu_unit
                    ww.true_mem += mem
                if ch.remaining <= 0:
                    th.chunk = None
                    srv.busy -= 1
                    sub.chunks_left -= 1
                    if sub.chunks_left == 0:
                        self._finish_sub(srv, sub, now + 1 + self.delay, "completed")

    def _finish_sub(self, srv: _Server, sub: _Sub, due: int, status: str) -> None:
        if self.budgets is not None:
            srv.live_mem -= sub.live_mem
            sub.live_mem = 0.0
            if status == "completed":
                h = self._history.setdefault(sub.query.profile.label, [0, 0.0, 0.0])
                h[0] += 1
                h[1] += sub.true_cpu
                h[2] += sub.true_mem
                self.series.sub_usage.append((srv.id, sub.key, sub.true_cpu, sub.true_mem))
        self._respond(sub, due, status)

    def _cancel(self, srv: _Server, sub: _Sub, now: int, status: str) -> None:
        if sub.state not in ("queued", "running"):
            return
        for th in srv.threads:
            if th.chunk is not None and th.chunk.sub is sub:
                th.chunk = None
                srv.busy -= 1
        # queued chunks are skipped lazily once the sub is no longer active
        self._finish_sub(srv, sub, now + 1 + self.delay, status)

    def _enforce(self, now: int) -> None:
        now_ms = now * self.tick_ms
        for srv in self.server_list:
            led = srv.ledger
            led.window_reset(now_ms)
            for th in srv.threads:
                if not th.pending:
                    continue
                pending, th.pending = th.pending, {}
                for sub, (cpu, mem) in pending.items():
                    self._charge(srv, sub, cpu, mem, now)

    def _charge(self, srv: _Server, sub: _Sub, cpu: float, mem: float, now: int) -> None:
        sub.measured_cpu += cpu
        sub.measured_mem += mem
        take_cpu = min(cpu, sub.reserved_cpu)
        take_mem = min(mem, sub.reserved_mem)
        sub.reserved_cpu -= take_cpu
        sub.reserved_mem -= take_mem
        cpu -= take_cpu
        mem -= take_mem
        if not self.budgets.enforce:
            return
        label = sub.query.profile.label
        led = srv.ledger
        ww = self.series.workload_window(self._bw(now), label)
        ok = led.try_charge(label, Resource.CPU, cpu)
        if ok:
            ww.charged_cpu += cpu
            ok = led.try_charge(label, Resource.MEM, mem)
            if ok:
                ww.charged_mem += mem
        if not ok and self.budgets.cancel_in_flight and sub.state in ("queued", "running"):
            ww.cancellations += 1
            self._cancel(srv, sub, now, "cancelled")

    def _sample(self, now: int) -> None:
        heap = self.budgets.heap_bytes
        for srv in self.server_list:
            frac = srv.live_mem / heap if heap else 0.0
            snap = srv.accountant.sample_and_aggregate((th.slot for th in srv.threads), frac)
            if snap is None:
                continue
            victims = kill_policy(snap)
            if not victims:
                continue
            subs = {}
            for th in srv.threads:
                if th.chunk is not None:
                    subs[th.chunk.sub.key] = th.chunk.sub
            for ch in srv.queue:
                subs.setdefault(ch.sub.key, ch.sub)
            for key in sorted(victims):
                sub = subs.get(key)
                if sub is not None:
                    self.series.workload_window(self._bw(now), sub.query.profile.label).kills += 1
                    self._cancel(srv, sub, now, "killed")

    def _deliver_responses(self, now: int) -> None:
        for sub in self.to_brokers.pop(now, ()):
            q = sub.query
            sel = self.brokers[q.broker]
            sel.on_response(q.profile.table, sub.server, (now - sub.sent) * self.tick_ms,
                            now * self.tick_ms)
            if sub.state != "completed" and q.status == "completed":
                q.status = sub.state
            sub.state = "returned"
            q.pending -= 1
            if q.pending == 0:
                del self.live[q.qid]
                if q.status == "completed":
                    self.completed += 1
                else:
                    self.rejected += 1
                self.series.queries.append(
                    QueryRecord(q.qid, q.profile.label, q.arrival, now, q.status, tuple(q.servers))
                )

    # ------------------------------------------------------------------ driver

    def tick(self) -> None:
        now = self.clock
        for sid, p in self.transitions.get(now, ()):
            self.servers[sid].p = p
        if self.rebalance is not None:
            self._advance_rebalance(now)
        if self.sample_ticks_q and now % self.sample_ticks_q == 0:
            for sel in self.brokers:
                sel.refresh_idle(now * self.tick_ms)
        self._deliver_responses(now)
        self._arrivals(now)
        for sub in self.to_servers.pop(now, ()):
            self._receive(sub, now)
        self._process(now)
        if self.budgets is not None:
            if (now + 1) % self.acct_ticks == 0:
                self._enforce(now + 1)
            if (now + 1) % self.sample_ticks == 0:
                self._sample(now + 1)
        self.clock = now + 1

    def census(self) -> dict[str, int]:
        """Classify every injected query by where it currently is."""
        transit, queued, executing = set(), set(), set()
        for subs in list(self.to_servers.values()) + list(self.to_brokers.values()):
            for sub in subs:
                transit.add(sub.query.qid)
        for srv in self.server_list:
            for ch in srv.queue:
                if ch.sub.state == "queued":
                    queued.add(ch.sub.query.qid)
            for th in srv.threads:
                if th.chunk is not None:
                    executing.add(th.chunk.sub.query.qid)
        queued -= executing
        transit -= executing | queued
        live_other = set(self.live) - transit - queued - executing
        return {
            "injected": self.injected,
            "in_transit": len(transit),
            "queued": len(queued),
            "executing": len(executing),
            "completed": self.completed,
            "rejected": self.rejected,
            "unaccounted": len(live_other),
        }

    def run(self) -> MetricsSeries:
        while self.clock < self.n_ticks:
            self.tick()
        return self.finish()

    def finish(self) -> MetricsSeries:
        s = self.series
        s.duration_ticks = self.clock
        s.census = self.census()
        if self.rebalance is not None:
            rb = self.rebalance
            s.rebalance_audit = {
                "min_serving": rb.min_serving,
                "routed_to_drained": rb.routed_to_drained,
                "steps_completed": rb.cursor,
                "steps_total": len(rb.steps),
            }
        if self.budgets is not None:
            for sid, key, _, _ in s.sub_usage:
                usage = self.servers[sid].accountant.accounted(key)
                s.accounted[(sid, key)] = (usage.cpu_ns, usage.mem_bytes)
        return s


def run(scenario: Scenario) -> MetricsSeries:
    return Simulation(scenario).run()
