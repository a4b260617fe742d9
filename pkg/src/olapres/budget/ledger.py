"""Per-host budget ledger keyed by (workload, resource).

Budgets only go down inside a window and refill to the full amount when the
window expires. Skipped windows are not banked: after 2.5 idle windows the
entry gets one refill and its window start moves forward by two windows.
"""

from __future__ import annotations

import logging
import threading
from collections import Counter
from dataclasses import dataclass
from enum import Enum

log = logging.getLogger(__name__)

DEFAULT_WINDOW_MS = 5000.0


class Resource(str, Enum):
    CPU = "CPU"
    MEM = "MEM"


class UnknownWorkload(LookupError):
    pass


@dataclass
class BudgetEntry:
    window_budget: float
    remaining: float
    window_start: float = 0.0


class BudgetLedger:
    """Remaining CPU/memory budget per workload on one host.

    ``try_charge`` compares and decrements under a per-ledger lock, so
    concurrent callers can never drive ``remaining`` below zero. Workloads
    with no entry are exempt unless ``strict`` is set.
    """

    def __init__(self, host: str = "", node_type: str = "SERVER",
                 window_ms: float = DEFAULT_WINDOW_MS, strict: bool = False):
        if window_ms <= 0:
            raise ValueError("window_ms must be > 0")
        self.host = host
        self.node_type = node_type
        self.window_ms = window_ms
        self.strict = strict
        self.entries: dict[tuple[str, Resource], BudgetEntry] = {}
        self.rejections: Counter = Counter()
        self._lock = threading.Lock()

    def __contains__(self, workload: str) -> bool:
        return (workload, Resource.CPU) in self.entries or (workload, Resource.MEM) in self.entries

    def workloads(self) -> list[str]:
        return sorted({w for w, _ in self.entries})

    def remaining(self, workload: str, resource: Resource) -> float:
        return self.entries[(workload, Resource(resource))].remaining

    def snapshot(self) -> dict[tuple[str, str], tuple[float, float, float]]:
        return {
            (w, r.value): (e.window_budget, e.remaining, e.window_start)
            for (w, r), e in sorted(self.entries.items())
        }

    def set_budget(self, workload: str, resource: Resource, budget: float, now: float = 0.0) -> None:
        if budget <= 0:
            raise ValueError(f"budget for {workload}/{resource} must be > 0")
        key = (workload, Resource(resource))
        with self._lock:
            entry = self.entries.get(key)
            if entry is None:
                self.entries[key] = BudgetEntry(budget, budget, now)
                return
            delta = budget - entry.window_budget
            if delta >= 0:
                entry.remaining += delta
            else:
                entry.remaining = min(entry.remaining, budget)
            entry.window_budget = budget

    def window_reset(self, now: float) -> None:
        with self._lock:
            for entry in self.entries.values():
                self._reset_entry(entry, now)

    def _reset_entry(self, entry: BudgetEntry, now: float) -> None:
        elapsed = now - entry.window_start
        if elapsed >= self.window_ms:
            entry.window_start += (elapsed // self.window_ms) * self.window_ms
            entry.remaining = entry.window_budget

    def try_charge(self, workload: str, resource: Resource, amount: float,
                   now: float | None = None) -> bool:
        """Charge ``amount`` iff that much budget remains; never partial."""
        if amount < 0:
            raise ValueError("charge amount must be >= 0")
        key = (workload, Resource(resource))
        with self._lock:
            entry = self.entries.get(key)
            if entry is None:
                if self.strict:
                    raise UnknownWorkload(workload)
                return True
            if now is not None:
                self._reset_entry(entry, now)
            if entry.remaining >= amount:
                entry.remaining -= amount
                return True
            return False

    def refund(self, workload: str, resource: Resource, amount: float) -> None:
        key = (workload, Resource(resource))
        with self._lock:
            entry = self.entries.get(key)
            if entry is not None:
                entry.remaining = min(entry.window_budget, entry.remaining + amount)

    def add_or_update_workload(self, config, now: float = 0.0) -> bool:
        """Install the budgets of ``config`` that target this host's node type.

        Reapplying an identical config is a no-op. Returns False when the
        config has nothing for this node type.
        """
        node = config.node_config(self.node_type)
        if node is None:
            return False
        profile = node.enforcement_profile
        self.set_budget(config.workload_name, Resource.CPU, profile.cpu_cost_ns, now)
        self.set_budget(config.workload_name, Resource.MEM, profile.memory_cost_bytes, now)
        return True


def admit_query(ledger: BudgetLedger, workload: str, cpu_cost: float = 0.0,
                mem_cost: float = 0.0, now: float | None = None) -> bool:
    """Provisional admission charge: CPU first, then memory.

    A memory failure refunds the CPU part, so a rejected query leaves the
    ledger as it found it.
    """
    if not ledger.try_charge(workload, Resource.CPU, cpu_cost, now):
        ledger.rejections[workload] += 1
        return False
    if not ledger.try_charge(workload, Resource.MEM, mem_cost, now):
        ledger.refund(workload, Resource.CPU, cpu_cost)
        ledger.rejections[workload] += 1
        return False
    return True


def enforce_thread_deltas(ledger: BudgetLedger, workload: str, cpu_delta: float,
                          mem_delta: float, now: float | None = None) -> bool:
    """Charge one accounting interval of thread usage; False means cancel."""
    if not ledger.try_charge(workload, Resource.CPU, cpu_delta, now):
        return False
    return ledger.try_charge(workload, Resource.MEM, mem_delta, now)
