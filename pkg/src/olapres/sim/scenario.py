"""Scenario files: declarative description of one simulation run.

Sections: ``topology``, ``workloads``, ``events``, ``policy``, ``budgets``,
``rebalance``, ``sim`` and ``seed``. Unknown keys are errors so a typo can
never silently fall back to a default.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    PositiveFloat,
    PositiveInt,
    ValidationError,
    model_validator,
)

from ..budget.config import WorkloadConfig
from ..selector import SelectionPolicy


class ScenarioError(ValueError):
    """Scenario validation failure carrying one message per bad field."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Topology(_Strict):
    brokers: PositiveInt = 3
    replicas: PositiveInt = 5
    mss_count: PositiveInt = 1
    threads_per_server: PositiveInt = 4
    tables: tuple[str, ...] = ("table",)


class WorkloadProfile(_Strict):
    label: str = "default"
    qps: NonNegativeFloat
    base_latency_ms: PositiveFloat = 1.35
    segments: PositiveInt | None = None
    table: str = "table"
    mem_bytes_per_unit: NonNegativeFloat = 1.0e5
    mem_jitter: float = Field(0.0, ge=0.0, lt=1.0)
    latency_jitter: float = Field(0.0, ge=0.0, lt=1.0)


class Degradation(_Strict):
    server: str
    start_ms: NonNegativeFloat
    end_ms: PositiveFloat
    p: float = Field(gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _ordered(self):
        if self.end_ms <= self.start_ms:
            raise ValueError("end_ms must be after start_ms")
        return self


class Policy(_Strict):
    scorer: Literal["round_robin", "inflight", "latency_ema", "hybrid"] = "hybrid"
    mode: Literal["argmin", "softmax"] = "argmin"
    tau_rule: Literal["min", "max", "mean"] = "min"
    alpha: float = Field(2 / 3, gt=0.0, le=1.0)
    exponent: PositiveFloat = 3.0
    latency_prior_ms: NonNegativeFloat = 1.0
    queue_sample_ms: NonNegativeFloat = 100.0
    latency_decay_ms: NonNegativeFloat = 5000.0
    tau_scale: PositiveFloat = 0.5
    routing: Literal["mss", "replica_group"] = "mss"

    def selection_policy(self) -> SelectionPolicy:
        return SelectionPolicy(
            scorer=self.scorer, mode=self.mode, tau_rule=self.tau_rule, alpha=self.alpha,
            exponent=self.exponent, latency_prior_ms=self.latency_prior_ms,
            queue_sample_ms=self.queue_sample_ms,
            latency_decay_ms=self.latency_decay_ms, tau_scale=self.tau_scale,
        )


class Budgets(_Strict):
    window_ms: PositiveFloat = 5000.0
    accounting_interval_ms: PositiveFloat = 1.0
    sampling_interval_ms: PositiveFloat = 1.0
    strict: bool = False
    enforce: bool = True
    cancel_in_flight: bool = True
    provisional_cpu_ns: NonNegativeFloat = 0.0
    provisional_mem_bytes: NonNegativeFloat = 0.0
    heap_bytes: PositiveFloat | None = None
    workloads: tuple[WorkloadConfig, ...] = ()


class RebalancePlan(_Strict):
    desired: dict[str, tuple[str, ...]]
    threshold: int | None = Field(None, ge=0)
    progress_batch: PositiveInt | None = None
    start_ms: NonNegativeFloat = 0.0
    drain_window_ms: NonNegativeFloat = 50.0
    bytes_per_ms: PositiveFloat = 1.0e6
    segment_bytes: PositiveFloat = 1.0e7


class SimSettings(_Strict):
    tick_ms: PositiveFloat = 0.1
    duration_ms: NonNegativeFloat = 1000.0
    window_ms: PositiveFloat = 100.0
    message_delay_ticks: int = Field(1, ge=0)
    arrivals: Literal["deterministic", "poisson"] = "deterministic"
    queue_cap: PositiveInt | None = None
    segments_per_mss: PositiveInt = 4
    warmup_ms: NonNegativeFloat = 0.0


class Scenario(_Strict):
    topology: Topology = Topology()
    workloads: tuple[WorkloadProfile, ...] = ()
    events: tuple[Degradation, ...] = ()
    policy: Policy = Policy()
    budgets: Budgets | None = None
    rebalance: RebalancePlan | None = None
    sim: SimSettings = SimSettings()
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check_servers(self):
        known = set(self.server_ids())
        for k, ev in enumerate(self.events):
            if ev.server not in known:
                raise ValueError(f"events[{k}].server: unknown server {ev.server!r}")
        if self.rebalance is not None:
            for host in self.rebalance.desired:
                if host not in known:
                    raise ValueError(f"rebalance.desired: unknown server {host!r}")
        return self

    def server_ids(self) -> list[str]:
        t = self.topology
        return [server_id(i, j) for i in range(t.mss_count) for j in range(t.replicas)]

    def with_overrides(self, **sections) -> Scenario:
        data = self.model_dump(mode="json", by_alias=True)
        for key, value in sections.items():
            if isinstance(value, BaseModel):
                value = value.model_dump(mode="json", by_alias=True)
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return parse_scenario_data(data)

    def to_json(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


def server_id(row: int, col: int) -> str:
    return f"s{row}-{col}"


def _format_errors(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append(f"{path}: {err['msg']}")
    return out


def parse_scenario_data(data: dict) -> Scenario:
    try:
        return Scenario.model_validate(data)
    except ValidationError as exc:
        raise ScenarioError(_format_errors(exc)) from None


def parse_scenario(path: str | Path) -> Scenario:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"<file>: invalid JSON ({exc})"]) from None
    return parse_scenario_data(data)


def dump_scenario(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario.to_json(), indent=2, sort_keys=True) + "\n")
