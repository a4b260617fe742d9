from .accounting import SampleAccountant, ThreadSlot, Usage, UsageSnapshot, kill_policy
from .config import HostInfo, WorkloadConfig, load_workload_configs, propagate_budgets
from .ledger import (
    BudgetLedger,
    Resource,
    UnknownWorkload,
    admit_query,
    enforce_thread_deltas,
)

__all__ = [
    "BudgetLedger",
    "HostInfo",
    "Resource",
    "SampleAccountant",
    "ThreadSlot",
    "UnknownWorkload",
    "Usage",
    "UsageSnapshot",
    "WorkloadConfig",
    "admit_query",
    "enforce_thread_deltas",
    "kill_policy",
    "load_workload_configs",
    "propagate_budgets",
]
