"""Maintenance-zone aware placement: row goodness and greedy swap repair.

A row (mirrored server set) is *good* when no zone holds more than
``ceil(R / MZ)`` of its instances, so draining any single zone takes down at
most that many replicas of each segment. ``ceil(R / MZ)`` is 1 whenever
``R <= MZ``, which covers both availability cases with one predicate.

Repair swaps instances between rows. A swap is accepted only if neither row's
excess grows and the combined excess of the two rows shrinks, so every swap
makes progress and a repaired row is never broken again.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from math import ceil
from typing import NamedTuple, Sequence

from .cluster import AssignmentMatrix, Cell, Instance, TopologyError, mz_histogram

log = logging.getLogger(__name__)


def zone_threshold(num_replica_groups: int, mz_count: int) -> int:
    return ceil(num_replica_groups / mz_count)


@dataclass(frozen=True)
class RowStatus:
    overpopulated_mzs: frozenset[str]
    excess: int

    @property
    def good(self) -> bool:
        return self.excess == 0


def row_status(row: Sequence[Instance], num_replica_groups: int, mz_count: int) -> RowStatus:
    if len(row) != num_replica_groups:
        raise TopologyError(f"row has {len(row)} cells, expected {num_replica_groups}")
    limit = zone_threshold(num_replica_groups, mz_count)
    over = {mz: c - limit for mz, c in mz_histogram(row).items() if c > limit}
    return RowStatus(frozenset(over), sum(over.values()))


def _excess(mzs: Sequence[str], limit: int) -> int:
    counts: dict[str, int] = {}
    for z in mzs:
        counts[z] = counts.get(z, 0) + 1
    return sum(c - limit for c in counts.values() if c > limit)


def bad_rows(matrix: AssignmentMatrix) -> list[int]:
    r = matrix.num_replica_groups
    return [i for i, row in enumerate(matrix.rows) if not row_status(row, r, matrix.mz_count).good]


@dataclass(frozen=True)
class SwapRecord:
    row_a: int
    col_a: int
    row_b: int
    col_b: int
    before: tuple[int, int]
    after: tuple[int, int]

    @property
    def cells(self) -> tuple[Cell, Cell]:
        return (self.row_a, self.col_a), (self.row_b, self.col_b)


def _swap_excess(
    mz_rows: list[list[str]], a: Cell, b: Cell, limit: int
) -> tuple[tuple[int, int], tuple[int, int]]:
    (ia, ja), (ib, jb) = a, b
    before = (_excess(mz_rows[ia], limit), _excess(mz_rows[ib], limit))
    za, zb = mz_rows[ia][ja], mz_rows[ib][jb]
    row_a = list(mz_rows[ia])
    row_b = list(mz_rows[ib])
    row_a[ja], row_b[jb] = zb, za
    return before, (_excess(row_a, limit), _excess(row_b, limit))


def _valid(before: tuple[int, int], after: tuple[int, int]) -> bool:
    return after[0] <= before[0] and after[1] <= before[1] and sum(after) < sum(before)


def is_valid_swap(matrix: AssignmentMatrix, cell_a: Cell, cell_b: Cell) -> bool:
    if cell_a[0] == cell_b[0]:
        raise ValueError("swap cells must lie in different rows")
    limit = zone_threshold(matrix.num_replica_groups, matrix.mz_count)
    before, after = _swap_excess([list(r) for r in matrix.mz_rows()], cell_a, cell_b, limit)
    return _valid(before, after)


class RepairResult(NamedTuple):
    matrix: AssignmentMatrix
    swaps: list[SwapRecord]
    residual_bad_rows: list[int]

    @property
    def complete(self) -> bool:
        return not self.residual_bad_rows

    def modified_rows(self) -> set[int]:
        rows = set()
        for s in self.swaps:
            rows.update((s.row_a, s.row_b))
        return rows


# one swap moves one instance in and one out of each row, so each row's
# excess drops by at most one
MAX_GAIN = 2


def _find_swap(mz_rows: list[list[str]], limit: int) -> tuple[Cell, Cell, tuple, tuple] | None:
    n = len(mz_rows)
    counts = []
    for r in mz_rows:
        c: dict[str, int] = {}
        for z in r:
            c[z] = c.get(z, 0) + 1
        counts.append(c)
    excess = [sum(v - limit for v in c.values() if v > limit) for c in counts]
    bad = [i for i in range(n) if excess[i] > 0]
    good = [i for i in range(n) if excess[i] == 0]

    def moved(i: int, out_z: str, in_z: str) -> int:
        # excess of row i after one out_z instance is replaced by in_z
        c = counts[i]
        return excess[i] - (c[out_z] > limit) + (c.get(in_z, 0) >= limit)

    def candidates(i: int) -> list[Cell]:
        # one cell per overpopulated zone; other cells of that zone give
        # identical outcomes and the scan keeps the first of equals
        cells = []
        for z in sorted(z for z, c in counts[i].items() if c > limit):
            j = max(j for j in range(len(mz_rows[i])) if mz_rows[i][j] == z)
            cells.append((i, j))
        return cells

    def scan(i: int, partners: list[int], want_best: bool):
        best = None
        for a in candidates(i):
            za = mz_rows[a[0]][a[1]]
            for k in partners:
                seen = set()
                for jb in reversed(range(len(mz_rows[k]))):
                    zb = mz_rows[k][jb]
                    if zb == za or zb in seen:
                        continue
                    seen.add(zb)
                    before = (excess[i], excess[k])
                    after = (moved(i, za, zb), moved(k, zb, za))
                    if not _valid(before, after):
                        continue
                    gain = sum(before) - sum(after)
                    if best is None or gain > best[0]:
                        best = (gain, a, (k, jb), before, after)
                        if not want_best or gain >= MAX_GAIN:
                            return best
        return best

    # Pairs of bad rows first: such a swap can fix two rows at once and
    # touches no row that was already good.
    best = None
    for i in bad:
        found = scan(i, [k for k in bad if k != i], want_best=True)
        if found and (best is None or found[0] > best[0]):
            best = found
            if best[0] >= MAX_GAIN:
                break
    if best is None:
        for i in bad:
            best = scan(i, good, want_best=False)
            if best:
                break
    if best is None:
        return None
    _, a, b, before, after = best
    return a, b, before, after


def repair(matrix: AssignmentMatrix) -> RepairResult:
    """Greedily swap instances until every row is good.

    Bad rows are visited in ascending order and overpopulated zones in label
    order. Swaps between two bad rows are preferred (largest excess drop
    wins); a good row is only used as partner when no bad-row swap exists.
    If no valid swap remains while bad rows persist (only possible when the
    zone distribution is unbalanced), the partial result is returned with the
    residual bad rows listed.
    """
    limit = zone_threshold(matrix.num_replica_groups, matrix.mz_count)
    rows = [list(r) for r in matrix.rows]
    mz_rows = [[inst.mz for inst in r] for r in rows]
    swaps: list[SwapRecord] = []
    while True:
        found = _find_swap(mz_rows, limit)
        if found is None:
            break
        (ia, ja), (ib, jb), before, after = found
        rows[ia][ja], rows[ib][jb] = rows[ib][jb], rows[ia][ja]
        mz_rows[ia][ja], mz_rows[ib][jb] = mz_rows[ib][jb], mz_rows[ia][ja]
        swaps.append(SwapRecord(ia, ja, ib, jb, before, after))
    out = AssignmentMatrix(tuple(tuple(r) for r in rows), matrix.mz_count)
    residual = [i for i, r in enumerate(mz_rows) if _excess(r, limit) > 0]
    if residual:
        log.warning("best-effort placement: rows %s remain overpopulated", residual)
    return RepairResult(out, swaps, residual)


def replay(matrix: AssignmentMatrix, swaps: Sequence[SwapRecord]) -> AssignmentMatrix:
    for s in swaps:
        matrix = matrix.swapped(*s.cells)
    return matrix


def apply_uplift(matrix: AssignmentMatrix, new_instances: Sequence[Instance]) -> RepairResult:
    """Append one replica-group column (one new instance per row), then repair."""
    if len(new_instances) != matrix.num_rows:
        raise TopologyError(
            f"uplift needs {matrix.num_rows} instances, got {len(new_instances)}"
        )
    rows = tuple(row + (new,) for row, new in zip(matrix.rows, new_instances))
    return repair(AssignmentMatrix(rows, matrix.mz_count))


def apply_node_swap(
    matrix: AssignmentMatrix, old_instance: Instance | str, new_instance: Instance
) -> RepairResult:
    old_id = old_instance.id if isinstance(old_instance, Instance) else old_instance
    try:
        i, j = matrix.locate(old_id)
    except KeyError:
        raise TopologyError(f"unknown instance {old_id!r}") from None
    return repair(matrix.with_cell(i, j, new_instance))


def apply_downlift(
    matrix: AssignmentMatrix,
    removed_instances: Sequence[Instance | str],
    replacement_pool: Sequence[Instance] = (),
) -> RepairResult:
    """Remove instances, either as a whole column or by cell replacement.

    With an empty ``replacement_pool`` the removal set must contain exactly one
    instance per row; those cells are dropped (R shrinks by one) and the rows
    are repaired against the recomputed threshold. Otherwise every removed
    instance is replaced in place from the pool, like a sequence of node swaps.
    """
    ids = [x.id if isinstance(x, Instance) else x for x in removed_instances]
    if not ids:
        return RepairResult(matrix, [], bad_rows(matrix))
    cells = []
    for inst_id in ids:
        try:
            cells.append(matrix.locate(inst_id))
        except KeyError:
            raise TopologyError(f"unknown instance {inst_id!r}") from None

    if not replacement_pool:
        by_row = {i: j for i, j in cells}
        if len(by_row) != len(cells) or len(by_row) != matrix.num_rows:
            raise TopologyError("removal set is not one instance per row and no replacement pool")
        if matrix.num_replica_groups < 2:
            raise TopologyError("cannot remove the last replica group")
        rows = tuple(
            tuple(inst for j, inst in enumerate(row) if j != by_row[i])
            for i, row in enumerate(matrix.rows)
        )
        return repair(AssignmentMatrix(rows, matrix.mz_count))

    if len(replacement_pool) < len(ids):
        raise TopologyError("replacement pool smaller than removal set")
    swaps: list[SwapRecord] = []
    result = RepairResult(matrix, [], [])
    for inst_id, new in zip(ids, replacement_pool):
        result = apply_node_swap(result.matrix, inst_id, new)
        swaps.extend(result.swaps)
    return RepairResult(result.matrix, swaps, result.residual_bad_rows)


def zone_drain_survivors(matrix: AssignmentMatrix, zone: str) -> list[int]:
    """Live replicas per row once every instance of ``zone`` is drained."""
    return [sum(1 for inst in row if inst.mz != zone) for row in matrix.rows]
