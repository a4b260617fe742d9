"""Topology and rebalance input files.

A topology file describes one table's cluster layout::

    {
      "replica_groups": 3,
      "instances_per_rg": 2,
      "mz_count": 3,                      # optional, defaults to distinct zones
      "instances": [{"id": "i0", "mz": "A"}, ...],
      "matrix": [["i0", "i1", "i2"], ...], # optional existing layout
      "segments": [{"id": "seg0", "size_bytes": 1e8}, ...],
      "lifecycle": [                       # optional, applied in order
        {"op": "uplift", "instances": [{"id": "i9", "mz": "B"}, ...]},
        {"op": "node_swap", "old": "i3", "new": {"id": "i10", "mz": "C"}},
        {"op": "downlift", "removed": ["i0", "i4"], "pool": []}
      ]
    }

Without ``matrix`` the layout is built from ``instances`` by round-robin over
zones. A rebalance file is either a topology file (current layout vs. its
repaired layout) or explicit ``initial``/``desired`` host assignments.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveFloat, PositiveInt

from .cluster import AssignmentMatrix, Instance, TopologyError, build_matrix


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class InstanceSpec(_Strict):
    id: str = Field(min_length=1)
    mz: str = Field(min_length=1)

    def instance(self) -> Instance:
        return Instance(self.id, self.mz)


class SegmentSpec(_Strict):
    id: str = Field(min_length=1)
    size_bytes: PositiveFloat | None = None


class Uplift(_Strict):
    op: Literal["uplift"]
    instances: tuple[InstanceSpec, ...]


class NodeSwap(_Strict):
    op: Literal["node_swap"]
    old: str
    new: InstanceSpec


class Downlift(_Strict):
    op: Literal["downlift"]
    removed: tuple[str, ...]
    pool: tuple[InstanceSpec, ...] = ()


LifecycleOp = Annotated[Union[Uplift, NodeSwap, Downlift], Field(discriminator="op")]


class TopologyFile(_Strict):
    replica_groups: PositiveInt
    instances_per_rg: PositiveInt
    mz_count: PositiveInt | None = None
    instances: tuple[InstanceSpec, ...]
    matrix: tuple[tuple[str, ...], ...] | None = None
    segments: tuple[SegmentSpec, ...] = ()
    lifecycle: tuple[LifecycleOp, ...] = ()

    def zone_count(self) -> int:
        return self.mz_count or len({i.mz for i in self.instances})

    def build(self) -> AssignmentMatrix:
        pool = [i.instance() for i in self.instances]
        if self.matrix is None:
            return build_matrix(self.replica_groups, self.instances_per_rg, pool, self.zone_count())
        by_id = {i.id: i for i in pool}
        try:
            rows = tuple(tuple(by_id[x] for x in row) for row in self.matrix)
        except KeyError as exc:
            raise TopologyError(f"matrix names unknown instance {exc.args[0]!r}") from None
        m = AssignmentMatrix(rows, self.zone_count())
        if m.num_rows != self.instances_per_rg or m.num_replica_groups != self.replica_groups:
            raise TopologyError(
                f"matrix is {m.num_rows}x{m.num_replica_groups}, expected "
                f"{self.instances_per_rg}x{self.replica_groups}"
            )
        return m

    def segment_ids(self) -> list[str]:
        return [s.id for s in self.segments]

    def segment_sizes(self) -> dict[str, float]:
        return {s.id: s.size_bytes for s in self.segments if s.size_bytes is not None}


class RebalanceFile(_Strict):
    initial: dict[str, tuple[str, ...]]
    desired: dict[str, tuple[str, ...]]
    threshold: NonNegativeInt | None = None
    progress_batch: PositiveInt | None = None
    segment_sizes: dict[str, PositiveFloat] = {}
    drain_window_ms: float = Field(1000.0, ge=0)
    bytes_per_ms: PositiveFloat = 1.0e6


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())


def load_topology(path: str | Path) -> TopologyFile:
    return TopologyFile.model_validate(read_json(path))
