"""Sampling-based per-query resource accounting and the query kill policy.

Worker threads only write their own slot: the ``(query, task)`` they are
running and a cumulative metric for that task, zeroed when a task is
installed. A single sampler walks all slots periodically. When it sees a
slot's task change, the last value it sampled for the old task is folded
into that query's inactive total. Whatever the old task did after that last
sample is never seen, which is why accuracy depends on the sampling
interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

TaskKey = tuple[str, str]

HEAP_KILL_ONE = 0.85
HEAP_KILL_ALL = 0.99


@dataclass
class Usage:
    cpu_ns: float = 0.0
    mem_bytes: float = 0.0

    def __add__(self, other: Usage) -> Usage:
        return Usage(self.cpu_ns + other.cpu_ns, self.mem_bytes + other.mem_bytes)

    def copy(self) -> Usage:
        return Usage(self.cpu_ns, self.mem_bytes)


@dataclass
class ThreadSlot:
    thread_id: int
    task: TaskKey | None = None
    metric: Usage = field(default_factory=Usage)

    def install(self, task: TaskKey) -> None:
        self.task = task
        self.metric = Usage()

    def record(self, cpu_ns: float, mem_bytes: float) -> None:
        self.metric.cpu_ns += cpu_ns
        self.metric.mem_bytes += mem_bytes


@dataclass
class UsageSnapshot:
    active_query_usage: dict[str, Usage]
    heap_fraction: float = 0.0


class SampleAccountant:
    """Sampler-side state: previous task and active metric per thread,
    inactive (finished-task) totals per query."""

    def __init__(self, usage_threshold: Callable[[float], bool] | None = None):
        self.previous_task: dict[int, TaskKey | None] = {}
        self.active_metric: dict[int, Usage] = {}
        self.inactive_metric: dict[str, Usage] = {}
        self.finished: dict[str, Usage] = {}
        self.usage_threshold = usage_threshold or (lambda heap: heap >= HEAP_KILL_ONE)

    def sample_and_aggregate(
        self, threads: Iterable[ThreadSlot], heap_fraction: float = 0.0, force: bool = False
    ) -> UsageSnapshot | None:
        threads = list(threads)
        active: set[str] = set()
        for t in threads:
            task = t.task
            metric = t.metric.copy()
            if task is not None:
                active.add(task[0])
            prev = self.previous_task.get(t.thread_id)
            if prev == task:
                self.active_metric[t.thread_id] = metric
            else:
                if prev is not None:
                    q = prev[0]
                    self.inactive_metric[q] = self.inactive_metric.get(q, Usage()) + \
                        self.active_metric.get(t.thread_id, Usage())
                self.previous_task[t.thread_id] = task
                self.active_metric[t.thread_id] = metric

        snapshot = None
        if force or self.usage_threshold(heap_fraction):
            usage = {q: self.inactive_metric.get(q, Usage()).copy() for q in active}
            for t in threads:
                prev = self.previous_task.get(t.thread_id)
                if prev is not None:
                    # accumulate across threads of the same query
                    usage[prev[0]] = usage[prev[0]] + self.active_metric[t.thread_id]
            snapshot = UsageSnapshot(usage, heap_fraction)

        for q in [q for q in self.inactive_metric if q not in active]:
            done = self.inactive_metric.pop(q)
            self.finished[q] = self.finished.get(q, Usage()) + done
        return snapshot

    def accounted(self, query_id: str) -> Usage:
        """Everything attributed to ``query_id`` so far, finished or live."""
        total = self.finished.get(query_id, Usage()) + self.inactive_metric.get(query_id, Usage())
        for tid, prev in self.previous_task.items():
            if prev is not None and prev[0] == query_id:
                total = total + self.active_metric[tid]
        return total


def kill_policy(snapshot: UsageSnapshot) -> set[str]:
    """Queries to terminate for the current heap pressure.

    At 99% heap every active query goes; at 85% only the one with the largest
    memory usage (lowest query id on ties).
    """
    usage = snapshot.active_query_usage
    if not usage:
        return set()
    if snapshot.heap_fraction >= HEAP_KILL_ALL:
        return set(usage)
    if snapshot.heap_fraction >= HEAP_KILL_ONE:
        worst = min(usage, key=lambda q: (-usage[q].mem_bytes, q))
        return {worst}
    return set()
