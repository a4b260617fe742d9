"""Impact-free rebalancing from a current host assignment to a target one.

Each iteration either drains a batch of hosts and moves them straight to
their target segment sets (a rebalancing step), or, when no host can be
drained without dropping some segment below ``T`` serving replicas, adds a
few missing segments to every unconverged host (a progress step). Progress
steps never remove anything; removals happen only while a host is drained.

The planner is deterministic: hosts are ranked by how far they are from
their target (ties by host id) and segments by serving-replica count (ties
by segment id). Restarting from any intermediate assignment yields the same
remaining steps.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from math import ceil
from typing import Callable, Iterable, Mapping

HostAssignment = Mapping[str, Iterable[str]]


class RebalanceError(ValueError):
    pass


class UnreachableThreshold(RebalanceError):
    pass


class RebalanceStalled(RebalanceError):
    pass


def compute_diff(
    initial: HostAssignment, desired: HostAssignment
) -> dict[str, tuple[frozenset[str], frozenset[str]]]:
    """Per host ``(Added, Removed)``; hosts missing on one side count as empty."""
    out = {}
    for h in sorted(set(initial) | set(desired)):
        init = frozenset(initial.get(h, ()))
        want = frozenset(desired.get(h, ()))
        out[h] = (want - init, init - want)
    return out


@dataclass(frozen=True)
class HostState:
    initial: frozenset[str]
    desired: frozenset[str]
    added: frozenset[str] = frozenset()
    removed: frozenset[str] = frozenset()
    down: bool = False

    @property
    def current(self) -> frozenset[str]:
        return (self.initial | self.added) - self.removed

    @property
    def pending_add(self) -> frozenset[str]:
        return self.desired - self.initial - self.added

    @property
    def pending_remove(self) -> frozenset[str]:
        return (self.initial - self.desired) - self.removed

    @property
    def converged(self) -> bool:
        return self.current == self.desired

    @property
    def distance(self) -> int:
        return len(self.desired ^ self.current)


@dataclass(frozen=True)
class RebalanceState:
    hosts: dict[str, HostState]
    threshold: int
    progress_batch: int
    step: int = 0

    @classmethod
    def from_assignments(
        cls,
        current: HostAssignment,
        desired: HostAssignment,
        threshold: int,
        progress_batch: int,
    ) -> RebalanceState:
        hosts = {
            h: HostState(frozenset(current.get(h, ())), frozenset(desired.get(h, ())))
            for h in sorted(set(current) | set(desired))
        }
        return cls(hosts, threshold, progress_batch)

    def assignment(self) -> dict[str, frozenset[str]]:
        return {h: s.current for h, s in self.hosts.items()}

    def desired(self) -> dict[str, frozenset[str]]:
        return {h: s.desired for h, s in self.hosts.items()}

    @property
    def converged(self) -> bool:
        return all(s.converged for s in self.hosts.values())

    def segments(self) -> set[str]:
        segs: set[str] = set()
        for s in self.hosts.values():
            segs |= s.initial | s.desired
        return segs

    def serving_counts(self, drained: Iterable[str] = ()) -> dict[str, int]:
        drained = set(drained)
        counts = dict.fromkeys(self.segments(), 0)
        for h, s in self.hosts.items():
            if s.down or h in drained:
                continue
            for seg in s.current:
                counts[seg] += 1
        return counts


def safe_to_drain(state: RebalanceState, candidate_hosts: Iterable[str], h: str) -> bool:
    """True if every segment on ``h`` keeps >= T serving replicas elsewhere.

    Hosts in ``candidate_hosts`` are treated as already down, so a batch of
    drains admitted one by one is jointly safe.
    """
    excluded = set(candidate_hosts) | {h}
    holders = dict.fromkeys(state.hosts[h].current, 0)
    for other, s in state.hosts.items():
        if other in excluded or s.down:
            continue
        for seg in s.current & holders.keys():
            holders[seg] += 1
    return all(c >= state.threshold for c in holders.values())


def select_hosts(state: RebalanceState) -> list[str]:
    ranked = sorted(
        (h for h, s in state.hosts.items() if not s.converged),
        key=lambda h: (-state.hosts[h].distance, h),
    )
    chosen: list[str] = []
    for h in ranked:
        if safe_to_drain(state, chosen, h):
            chosen.append(h)
    return chosen


@dataclass
class StepRecord:
    index: int
    action: str
    hosts: list[str]
    added: dict[str, list[str]]
    removed: dict[str, list[str]]
    serving: dict[str, int]
    drain_ms: float = 0.0
    download_ms: float = 0.0

    @property
    def min_serving(self) -> int:
        return min(self.serving.values(), default=0)

    def to_record(self) -> dict:
        return {
            "step": self.index,
            "action": self.action,
            "hosts": self.hosts,
            "added": self.added,
            "removed": self.removed,
            "min_serving": self.min_serving,
            "serving": dict(sorted(self.serving.items())),
            "drain_ms": self.drain_ms,
            "download_ms": self.download_ms,
        }


@dataclass
class StepCosts:
    """Simulated durations attached to rebalancing steps."""

    drain_window_ms: float = 1000.0
    bytes_per_ms: float = 1e6
    segment_sizes: Mapping[str, float] = field(default_factory=dict)
    default_segment_bytes: float = 1e8

    def download_ms(self, segments: Iterable[str]) -> float:
        total = sum(self.segment_sizes.get(s, self.default_segment_bytes) for s in segments)
        return total / self.bytes_per_ms


def rebalancing_step(
    state: RebalanceState, hosts: Iterable[str], costs: StepCosts | None = None
) -> tuple[RebalanceState, StepRecord]:
    """Drain ``hosts``, apply their full diff, bring them back."""
    hosts = list(hosts)
    for h in hosts:
        if h not in state.hosts:
            raise RebalanceError(f"unknown host {h!r}")
    if not hosts:
        nxt = dataclasses.replace(state, step=state.step + 1)
        return nxt, StepRecord(state.step, "rebalance", [], {}, {}, state.serving_counts())
    costs = costs or StepCosts()
    serving = state.serving_counts(drained=hosts)
    new_hosts = dict(state.hosts)
    added, removed = {}, {}
    for h in hosts:
        s = state.hosts[h]
        added[h] = sorted(s.pending_add)
        removed[h] = sorted(s.pending_remove)
        new_hosts[h] = dataclasses.replace(
            s, added=s.desired - s.initial, removed=s.initial - s.desired, down=False
        )
    record = StepRecord(
        state.step,
        "rebalance",
        hosts,
        added,
        removed,
        serving,
        drain_ms=costs.drain_window_ms,
        download_ms=max(costs.download_ms(a) for a in added.values()),
    )
    return dataclasses.replace(state, hosts=new_hosts, step=state.step + 1), record


def progress_step(state: RebalanceState) -> tuple[RebalanceState, StepRecord]:
    """Add up to ``progress_batch`` missing segments to each unconverged host.

    Segments with the fewest serving replicas go first. Nothing is removed
    and nobody is drained.
    """
    counts = state.serving_counts()
    new_hosts = dict(state.hosts)
    added = {}
    for h, s in state.hosts.items():
        if s.converged or not s.pending_add:
            continue
        picks = sorted(s.pending_add, key=lambda seg: (counts[seg], seg))[: state.progress_batch]
        added[h] = picks
        new_hosts[h] = dataclasses.replace(s, added=s.added | frozenset(picks))
    record = StepRecord(state.step, "progress", sorted(added), added, {}, counts)
    return dataclasses.replace(state, hosts=new_hosts, step=state.step + 1), record


@dataclass
class RebalanceTrace:
    initial: dict[str, frozenset[str]]
    desired: dict[str, frozenset[str]]
    threshold: int
    progress_batch: int
    steps: list[StepRecord]
    final: dict[str, frozenset[str]]
    initial_serving: dict[str, int]

    @property
    def min_serving(self) -> int:
        mins = [s.min_serving for s in self.steps]
        mins.append(min(self.initial_serving.values(), default=0))
        return min(mins)

    def violations(self) -> list[tuple[int, str, int]]:
        """``(step, segment, serving)`` wherever a segment fell below
        ``min(T, its serving count before the run)``.

        Segments that start under-replicated (new ones start at zero) are
        only held to what they already had.
        """
        out = []
        for s in self.steps:
            for seg, n in sorted(s.serving.items()):
                if n < min(self.threshold, self.initial_serving.get(seg, 0)):
                    out.append((s.index, seg, n))
        return out

    def to_lines(self) -> list[str]:
        return [json.dumps(s.to_record(), sort_keys=True) for s in self.steps]


def default_progress_batch(desired: HostAssignment) -> int:
    segs = set()
    for v in desired.values():
        segs.update(v)
    return max(1, ceil(0.05 * len(segs)))


def replica_counts(assignment: HostAssignment) -> dict[str, int]:
    counts: dict[str, int] = {}
    for segs in assignment.values():
        for s in segs:
            counts[s] = counts.get(s, 0) + 1
    return counts


def replay(initial: HostAssignment, steps: Iterable[StepRecord]) -> dict[str, frozenset[str]]:
    cur = {h: set(v) for h, v in initial.items()}
    for step in steps:
        for h, segs in step.added.items():
            cur.setdefault(h, set()).update(segs)
        for h, segs in step.removed.items():
            cur.setdefault(h, set()).difference_update(segs)
    return {h: frozenset(v) for h, v in cur.items()}


def run_rebalance(
    initial: HostAssignment,
    desired: HostAssignment,
    threshold: int | None = None,
    progress_batch: int | None = None,
    *,
    costs: StepCosts | None = None,
    goal_update: Callable[[int, dict[str, frozenset[str]]], HostAssignment | None] | None = None,
    max_steps: int = 100_000,
) -> RebalanceTrace:
    """Run the planner to convergence and return the full step trace.

    ``threshold`` defaults to R - 1 with R the smallest replica count in the
    target layout. ``goal_update`` is polled before every step; returning a
    new target re-diffs the remaining work against the current assignment.
    """
    counts = replica_counts(desired)
    if threshold is None:
        threshold = max(0, min(counts.values(), default=1) - 1)
    short = sorted(s for s, c in counts.items() if c < threshold + 1)
    if short:
        raise UnreachableThreshold(
            f"{len(short)} segments have fewer than T+1={threshold + 1} target replicas, "
            f"e.g. {short[:3]}"
        )
    if progress_batch is None:
        progress_batch = default_progress_batch(desired)
    if progress_batch < 1:
        raise RebalanceError("progress_batch must be >= 1")

    state = RebalanceState.from_assignments(initial, desired, threshold, progress_batch)
    init_serving = state.serving_counts()
    steps: list[StepRecord] = []
    while not state.converged:
        if len(steps) >= max_steps:
            raise RebalanceStalled(f"no convergence after {max_steps} steps")
        if goal_update is not None:
            new_goal = goal_update(state.step, state.desired())
            if new_goal is not None:
                state = dataclasses.replace(
                    RebalanceState.from_assignments(
                        state.assignment(), new_goal, threshold, progress_batch
                    ),
                    step=state.step,
                )
                if state.converged:
                    break
        hosts = select_hosts(state)
        if hosts:
            state, rec = rebalancing_step(state, hosts, costs)
        else:
            state, rec = progress_step(state)
            if not rec.added:
                blocked = sorted(h for h, s in state.hosts.items() if not s.converged)
                raise RebalanceStalled(
                    f"hosts {blocked} only have removals pending and cannot be drained"
                )
        steps.append(rec)
    return RebalanceTrace(
        {h: frozenset(v) for h, v in initial.items()},
        state.desired(),
        threshold,
        progress_batch,
        steps,
        state.assignment(),
        init_serving,
    )
