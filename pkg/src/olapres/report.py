"""Deterministic report files: tables plus one summary document."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

FORMATS = ("tsv", "jsonl")


@dataclass
class Table:
    name: str
    header: Sequence[str]
    rows: list[Sequence[Any]] = field(default_factory=list)


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isfinite(v) and v == int(v) and abs(v) < 1e15:
            return str(int(v))
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_cell(x) for x in v)
    return str(v)


def render_table(table: Table, fmt: str = "tsv") -> str:
    if fmt == "tsv":
        lines = ["\t".join(table.header)]
        lines += ["\t".join(_cell(v) for v in row) for row in table.rows]
    elif fmt == "jsonl":
        lines = [json.dumps(dict(zip(table.header, row)), sort_keys=True) for row in table.rows]
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return "\n".join(lines) + "\n" if lines else ""


def _clean(obj: Any) -> Any:
    # json has no NaN/inf; None keeps the file parseable
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def render_summary(summary: dict) -> str:
    return json.dumps(_clean(summary), indent=2, sort_keys=True) + "\n"


def emit_report(out_dir: str | Path, tables: Sequence[Table], summary: dict,
                fmt: str = "tsv", extra: dict[str, str] | None = None) -> list[Path]:
    """Write every table, the summary and any extra text files; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    ext = "tsv" if fmt == "tsv" else "jsonl"
    for t in tables:
        p = out / f"{t.name}.{ext}"
        p.write_text(render_table(t, fmt))
        written.append(p)
    p = out / "summary.json"
    p.write_text(render_summary(summary))
    written.append(p)
    for name, text in sorted((extra or {}).items()):
        p = out / name
        p.write_text(text)
        written.append(p)
    return written
