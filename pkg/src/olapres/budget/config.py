"""Workload configuration documents and budget propagation to hosts."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, model_validator

log = logging.getLogger(__name__)

NodeType = Literal["BROKER", "SERVER"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class EnforcementProfile(_Strict):
    cpu_cost_ns: PositiveFloat = Field(alias="cpuCostNs")
    memory_cost_bytes: PositiveFloat = Field(alias="memoryCostBytes")


class PropagationScheme(_Strict):
    type: Literal["TABLE", "TENANT"]
    tables: tuple[str, ...] = ()
    tenant: str | None = None

    @model_validator(mode="after")
    def _check_scope(self):
        if self.type == "TABLE" and not self.tables:
            raise ValueError("TABLE propagation needs a non-empty tables list")
        if self.type == "TENANT" and not self.tenant:
            raise ValueError("TENANT propagation needs a tenant")
        return self


class NodeConfig(_Strict):
    node_type: NodeType = Field(alias="nodeType")
    enforcement_profile: EnforcementProfile = Field(alias="enforcementProfile")
    propagation_scheme: PropagationScheme = Field(alias="propagationScheme")


class WorkloadConfig(_Strict):
    workload_name: str = Field(alias="workloadName", min_length=1)
    node_configs: tuple[NodeConfig, ...] = Field(alias="nodeConfigs", min_length=1)

    @model_validator(mode="after")
    def _unique_node_types(self):
        kinds = [n.node_type for n in self.node_configs]
        if len(kinds) != len(set(kinds)):
            raise ValueError("duplicate nodeType entries")
        return self

    def node_config(self, node_type: str) -> NodeConfig | None:
        for n in self.node_configs:
            if n.node_type == node_type:
                return n
        return None

    def to_json(self) -> dict:
        return self.model_dump(by_alias=True, mode="json")


def load_workload_configs(path: str | Path) -> list[WorkloadConfig]:
    """Read one config object or a list of them."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [WorkloadConfig.model_validate(d) for d in data]


@dataclass(frozen=True)
class HostInfo:
    node_type: str = "SERVER"
    tables: frozenset[str] = frozenset()
    tenant: str | None = None


@dataclass
class Propagation:
    budgets: dict[str, tuple[float, float]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def propagate_budgets(config: WorkloadConfig, topology: Mapping[str, HostInfo]) -> Propagation:
    """Which hosts receive which per-node budget.

    Every matching host gets the full per-node amount; budgets are not split
    across hosts since each host enforces on its own.
    """
    out = Propagation()
    for node in config.node_configs:
        scheme = node.propagation_scheme
        profile = node.enforcement_profile
        hits = []
        for host, info in sorted(topology.items()):
            if info.node_type != node.node_type:
                continue
            if scheme.type == "TABLE":
                match = bool(info.tables & set(scheme.tables))
            else:
                match = info.tenant == scheme.tenant
            if match:
                hits.append(host)
                out.budgets[host] = (profile.cpu_cost_ns, profile.memory_cost_bytes)
        if not hits:
            msg = (f"workload {config.workload_name!r}: {scheme.type} scheme for "
                   f"{node.node_type} matched no hosts")
            log.warning(msg)
            out.warnings.append(msg)
    return out
