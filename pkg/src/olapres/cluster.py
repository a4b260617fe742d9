"""Cluster vocabulary: instances, maintenance zones, the replica-group matrix.

Columns of an :class:`AssignmentMatrix` are replica groups; rows are
mirrored server sets (every instance in a row hosts the same segments).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence


class TopologyError(ValueError):
    """Raised for malformed cluster layouts."""


@dataclass(frozen=True, order=True)
class Instance:
    id: str
    mz: str

    def __str__(self) -> str:
        return f"{self.id}@{self.mz}"


Cell = tuple[int, int]


@dataclass(frozen=True)
class AssignmentMatrix:
    rows: tuple[tuple[Instance, ...], ...]
    mz_count: int

    def __post_init__(self) -> None:
        if not self.rows:
            raise TopologyError("matrix needs at least one row")
        width = len(self.rows[0])
        if width < 1:
            raise TopologyError("matrix needs at least one replica group")
        if any(len(r) != width for r in self.rows):
            raise TopologyError("ragged matrix rows")
        if self.mz_count < 1:
            raise TopologyError("mz_count must be >= 1")
        ids = [inst.id for row in self.rows for inst in row]
        if len(set(ids)) != len(ids):
            raise TopologyError("instance appears in more than one cell")

    @property
    def num_rows(self) -> int:
        return len(self.rows)

    @property
    def num_replica_groups(self) -> int:
        return len(self.rows[0])

    def cell(self, i: int, j: int) -> Instance:
        return self.rows[i][j]

    def instances(self) -> list[Instance]:
        return [inst for row in self.rows for inst in row]

    def locate(self, instance_id: str) -> Cell:
        for i, row in enumerate(self.rows):
            for j, inst in enumerate(row):
                if inst.id == instance_id:
                    return i, j
        raise KeyError(instance_id)

    def with_cell(self, i: int, j: int, inst: Instance) -> AssignmentMatrix:
        rows = [list(r) for r in self.rows]
        rows[i][j] = inst
        return AssignmentMatrix(tuple(tuple(r) for r in rows), self.mz_count)

    def swapped(self, a: Cell, b: Cell) -> AssignmentMatrix:
        rows = [list(r) for r in self.rows]
        (ia, ja), (ib, jb) = a, b
        rows[ia][ja], rows[ib][jb] = rows[ib][jb], rows[ia][ja]
        return AssignmentMatrix(tuple(tuple(r) for r in rows), self.mz_count)

    def mz_rows(self) -> list[tuple[str, ...]]:
        return [tuple(inst.mz for inst in row) for row in self.rows]


def mz_histogram(row: Iterable[Instance]) -> dict[str, int]:
    return dict(Counter(inst.mz for inst in row))


def is_balanced(instances: Iterable[Instance], zones: Iterable[str] | None = None) -> bool:
    """True when per-zone instance counts differ by at most one.

    ``zones`` lists every zone of the cluster so that empty zones count as 0.
    """
    counts = Counter(inst.mz for inst in instances)
    for z in zones or ():
        counts.setdefault(z, 0)
    if not counts:
        return True
    return max(counts.values()) - min(counts.values()) <= 1


def build_matrix(
    num_replica_groups: int,
    instances_per_rg: int,
    pool: Sequence[Instance],
    mz_count: int | None = None,
) -> AssignmentMatrix:
    """Fill an R x N matrix row-major, cycling through per-zone buckets.

    Zones are visited in label order; within a zone, instances keep pool
    order. A zone whose bucket runs dry is skipped, so an unbalanced pool
    still produces a full matrix (rows may then need repair).
    """
    r, n = num_replica_groups, instances_per_rg
    if r < 1 or n < 1:
        raise TopologyError("replica groups and instances per group must be >= 1")
    if len(pool) < r * n:
        raise TopologyError(f"pool has {len(pool)} instances, need {r * n}")
    buckets: dict[str, list[Instance]] = {}
    for inst in pool:
        buckets.setdefault(inst.mz, []).append(inst)
    zones = sorted(buckets)
    if not zones:
        raise TopologyError("empty maintenance-zone set")
    cursor = {z: 0 for z in zones}
    filled: list[Instance] = []
    k = 0
    while len(filled) < r * n:
        for step in range(len(zones)):
            z = zones[(k + step) % len(zones)]
            if cursor[z] < len(buckets[z]):
                filled.append(buckets[z][cursor[z]])
                cursor[z] += 1
                k = (k + step + 1) % len(zones)
                break
    rows = tuple(tuple(filled[i * r:(i + 1) * r]) for i in range(n))
    return AssignmentMatrix(rows, mz_count if mz_count is not None else len(zones))


def derive_host_assignment(
    matrix: AssignmentMatrix, segmap: Mapping[str, int]
) -> dict[str, frozenset[str]]:
    """Expand a segment -> row map into host -> segments for every cell."""
    per_row: dict[int, set[str]] = {i: set() for i in range(matrix.num_rows)}
    for seg, row in segmap.items():
        if not 0 <= row < matrix.num_rows:
            raise TopologyError(f"segment {seg!r} maps to missing row {row}")
        per_row[row].add(seg)
    out: dict[str, frozenset[str]] = {}
    for i, row in enumerate(matrix.rows):
        segs = frozenset(per_row[i])
        for inst in row:
            out[inst.id] = segs
    return out


def round_robin_segmap(segments: Sequence[str], num_rows: int) -> dict[str, int]:
    """Spread segments over mirrored server sets in order."""
    return {seg: k % num_rows for k, seg in enumerate(segments)}
