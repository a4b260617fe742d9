from .engine import Simulation, run
from .metrics import (
    DiversionResult,
    MetricsSeries,
    QueryRecord,
    healthy_latency_ms,
    measure_degradation_prevention,
    measure_diversion,
    nearest_rank,
)
from .scenario import Scenario, ScenarioError, dump_scenario, parse_scenario, parse_scenario_data

__all__ = [
    "DiversionResult",
    "MetricsSeries",
    "QueryRecord",
    "Scenario",
    "ScenarioError",
    "Simulation",
    "dump_scenario",
    "healthy_latency_ms",
    "measure_degradation_prevention",
    "measure_diversion",
    "nearest_rank",
    "parse_scenario",
    "parse_scenario_data",
    "run",
]
