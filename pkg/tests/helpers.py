"""Shared builders for the test-suite."""

from __future__ import annotations

import itertools
import random
from collections import Counter

from olapres.cluster import AssignmentMatrix, Instance


def matrix_from_labels(rows, mz_count=None):
    """Matrix whose cell (i, j) is instance ``i{i}_{j}`` in zone ``rows[i][j]``."""
    zones = {z for r in rows for z in r}
    return AssignmentMatrix(
        tuple(tuple(Instance(f"i{i}_{j}", z) for j, z in enumerate(r)) for i, r in enumerate(rows)),
        mz_count if mz_count is not None else len(zones),
    )


def labels(matrix):
    return [tuple(inst.mz for inst in row) for row in matrix.rows]


def balanced_labels(n, zones, rng: random.Random):
    """``n`` zone labels as even as possible over ``zones``, shuffled."""
    out = [zones[k % len(zones)] for k in range(n)]
    rng.shuffle(out)
    return out


def is_good(row, r, mz):
    lim = -(-r // mz)
    return max(Counter(row).values(), default=0) <= lim


def _can_partition(counts, k, r, lim):
    if k == 0:
        return sum(counts.values()) == 0
    zones = sorted(z for z in counts if counts[z] > 0)
    for combo in itertools.combinations_with_replacement(zones, r):
        c = Counter(combo)
        if any(v > lim for v in c.values()) or any(c[z] > counts[z] for z in c):
            continue
        rest = counts.copy()
        rest.subtract(c)
        if _can_partition(rest, k - 1, r, lim):
            return True
    return False


def brute_min_rows(rows, r, mz):
    """Fewest rows whose contents must change to make every row good.

    Any set of rows containing all bad rows can be re-dealt freely among
    itself, so the answer is the smallest such set whose pooled zone labels
    split into good rows. Independent of the repair algorithm.
    """
    lim = -(-r // mz)
    bad = [i for i, row in enumerate(rows) if not is_good(row, r, mz)]
    if not bad:
        return 0
    good = [i for i in range(len(rows)) if i not in bad]
    for extra in range(len(good) + 1):
        for add in itertools.combinations(good, extra):
            chosen = bad + list(add)
            cnt = Counter(z for i in chosen for z in rows[i])
            if _can_partition(cnt, len(chosen), r, lim):
                return len(chosen)
    return None
