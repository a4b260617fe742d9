"""``olapres`` command line: place, rebalance, simulate, qwi-report.

Exit codes: 0 ok, 2 bad input (parse/validation), 3 invariant violated
during the run, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import statistics
import sys
from dataclasses import dataclass
from pathlib import Path

from pydantic import ValidationError

from .budget.config import WorkloadConfig, load_workload_configs
from .cluster import TopologyError, derive_host_assignment, is_balanced, round_robin_segmap
from .placement import (
    apply_downlift,
    apply_node_swap,
    apply_uplift,
    bad_rows,
    repair,
    row_status,
    zone_drain_survivors,
    zone_threshold,
)
from .rebalance import RebalanceError, StepCosts, run_rebalance
from .report import Table, emit_report
from .sim.engine import Simulation
from .sim.metrics import measure_degradation_prevention, measure_diversion
from .sim.scenario import Budgets, Scenario, ScenarioError, parse_scenario
from .topology import RebalanceFile, TopologyFile, read_json

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_INVARIANT = 3
EXIT_IO = 4

FORMAT_ALIASES = {
    "tsv": "tsv",
    "delimiter-separated": "tsv",
    "jsonl": "jsonl",
    "structured-record": "jsonl",
}

log = logging.getLogger("olapres")


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    subcommand: str
    out: Path
    fmt: str = "tsv"
    scenario: Path | None = None
    topology: Path | None = None
    workloads: Path | None = None
    seed: int | None = None


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _format(text: str) -> str:
    try:
        return FORMAT_ALIASES[text]
    except KeyError:
        raise argparse.ArgumentTypeError(
            f"format must be one of {sorted(FORMAT_ALIASES)}"
        ) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="olapres", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="subcommand", required=True)

    def common(sp):
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--format", type=_format, default="tsv", dest="fmt",
                        help="tsv|delimiter-separated or jsonl|structured-record")

    sp = sub.add_parser("place", help="build or repair an MZ-aware replica layout")
    sp.add_argument("--topology", type=Path, required=True)
    common(sp)

    sp = sub.add_parser("rebalance", help="plan an impact-free rebalance")
    sp.add_argument("--topology", type=Path, required=True,
                    help="topology file, or a file with initial/desired assignments")
    common(sp)

    sp = sub.add_parser("simulate", help="run a broker/server simulation")
    sp.add_argument("--scenario", type=Path, required=True)
    sp.add_argument("--seed", type=_seed)
    common(sp)

    sp = sub.add_parser("qwi-report", help="simulate workload budgets and report enforcement")
    sp.add_argument("--scenario", type=Path, required=True)
    sp.add_argument("--workloads", type=Path, help="workload config file (overrides scenario)")
    sp.add_argument("--seed", type=_seed)
    common(sp)
    return p


def _config(args) -> RunConfig:
    cfg = RunConfig(
        subcommand=args.subcommand, out=args.out, fmt=args.fmt,
        scenario=getattr(args, "scenario", None), topology=getattr(args, "topology", None),
        workloads=getattr(args, "workloads", None), seed=getattr(args, "seed", None),
    )
    for path in (cfg.scenario, cfg.topology, cfg.workloads):
        if path is not None and not path.is_file():
            raise FileNotFoundError(f"input file not found: {path}")
    return cfg


# --------------------------------------------------------------------- place


def _apply_lifecycle(topo: TopologyFile, matrix):
    results = []
    for op in topo.lifecycle:
        if op.op == "uplift":
            res = apply_uplift(matrix, [i.instance() for i in op.instances])
        elif op.op == "node_swap":
            res = apply_node_swap(matrix, op.old, op.new.instance())
        else:
            res = apply_downlift(matrix, list(op.removed), [i.instance() for i in op.pool])
        results.append((op.op, res))
        matrix = res.matrix
    return matrix, results


def _placement(topo: TopologyFile):
    start = topo.build()
    res = repair(start)
    steps = [("repair", res)]
    final, more = _apply_lifecycle(topo, res.matrix)
    return start, final, steps + more


def cmd_place(cfg: RunConfig) -> int:
    topo = TopologyFile.model_validate(read_json(cfg.topology))
    start, final, steps = _placement(topo)
    r, mz = final.num_replica_groups, final.mz_count
    limit = zone_threshold(r, mz)

    swaps = Table("swaps", ["op_index", "op", "row_a", "col_a", "row_b", "col_b",
                            "excess_before", "excess_after"])
    for k, (op, res) in enumerate(steps):
        for s in res.swaps:
            swaps.rows.append([k, op, s.row_a, s.col_a, s.row_b, s.col_b,
                               list(s.before), list(s.after)])
    cells = Table("matrix", ["row", "col", "instance", "mz"])
    rows = Table("rows", ["row", "mzs", "overpopulated", "excess"])
    for i, row in enumerate(final.rows):
        for j, inst in enumerate(row):
            cells.rows.append([i, j, inst.id, inst.mz])
        st = row_status(row, r, mz)
        rows.rows.append([i, [x.mz for x in row], sorted(st.overpopulated_mzs), st.excess])

    zones = sorted({x.mz for x in final.instances()})
    survivors = {z: min(zone_drain_survivors(final, z)) for z in zones}
    required = r - limit
    residual = bad_rows(final)
    balanced = is_balanced(final.instances())
    summary = {
        "replica_groups": r,
        "mirrored_sets": final.num_rows,
        "mz_count": mz,
        "row_threshold": limit,
        "balanced_pool": balanced,
        "ops": [{"op": op, "swaps": len(res.swaps), "rows_modified": sorted(res.modified_rows()),
                 "residual_bad_rows": res.residual_bad_rows} for op, res in steps],
        "residual_bad_rows": residual,
        "best_effort": bool(residual),
        "zone_drain": {"required_live_replicas": required, "min_live_by_zone": survivors},
    }
    emit_report(cfg.out, [cells, swaps, rows], summary, cfg.fmt)
    if residual:
        log.warning("rows %s still overpopulated", residual)
        if balanced:
            return EXIT_INVARIANT
    return EXIT_OK


# ----------------------------------------------------------------- rebalance


def _rebalance_inputs(data: dict):
    if "initial" in data:
        rf = RebalanceFile.model_validate(data)
        initial = {h: frozenset(v) for h, v in rf.initial.items()}
        desired = {h: frozenset(v) for h, v in rf.desired.items()}
        costs = StepCosts(rf.drain_window_ms, rf.bytes_per_ms, dict(rf.segment_sizes))
        return initial, desired, rf.threshold, rf.progress_batch, costs
    topo = TopologyFile.model_validate(data)
    start, final, _ = _placement(topo)
    if final.num_rows != start.num_rows:
        raise TopologyError("lifecycle changed the number of mirrored server sets")
    segs = topo.segment_ids() or [f"seg{k}" for k in range(start.num_rows)]
    segmap = round_robin_segmap(segs, start.num_rows)
    initial = derive_host_assignment(start, segmap)
    desired = derive_host_assignment(final, segmap)
    return initial, desired, None, None, StepCosts(segment_sizes=topo.segment_sizes())


def cmd_rebalance(cfg: RunConfig) -> int:
    initial, desired, threshold, batch, costs = _rebalance_inputs(read_json(cfg.topology))
    trace = run_rebalance(initial, desired, threshold, batch, costs=costs)
    audit = Table("audit", ["step", "action", "hosts", "segments_added", "segments_removed",
                            "min_serving", "drain_ms", "download_ms"])
    for s in trace.steps:
        audit.rows.append([s.index, s.action, s.hosts,
                           sum(len(v) for v in s.added.values()),
                           sum(len(v) for v in s.removed.values()),
                           s.min_serving, s.drain_ms, s.download_ms])
    reached = trace.final == {h: desired.get(h, frozenset()) for h in trace.final}
    summary = {
        "threshold": trace.threshold,
        "progress_batch": trace.progress_batch,
        "steps": len(trace.steps),
        "rebalancing_steps": sum(1 for s in trace.steps if s.action == "rebalance"),
        "progress_steps": sum(1 for s in trace.steps if s.action == "progress"),
        "min_serving": trace.min_serving if trace.steps else None,
        "violations": [list(v) for v in trace.violations()],
        "reached_desired": reached,
    }
    extra = {"trace.jsonl": "".join(line + "\n" for line in trace.to_lines())}
    emit_report(cfg.out, [audit], summary, cfg.fmt, extra)
    if summary["violations"] or not reached:
        return EXIT_INVARIANT
    return EXIT_OK


# ------------------------------------------------------------------ simulate


def _load_scenario(cfg: RunConfig, workloads: list[WorkloadConfig] | None = None) -> Scenario:
    sc = parse_scenario(cfg.scenario)
    overrides = {}
    if cfg.seed is not None:
        overrides["seed"] = cfg.seed
    if workloads is not None:
        budgets = sc.budgets or Budgets()
        overrides["budgets"] = budgets.model_copy(update={"workloads": tuple(workloads)})
    return sc.with_overrides(**overrides) if overrides else sc


def _event_summary(series, sc: Scenario) -> list[dict]:
    out = []
    counts = {}
    for ev in sc.events:
        counts[ev.server] = counts.get(ev.server, 0) + 1
    for ev in sc.events:
        rec = ev.model_dump()
        if counts[ev.server] == 1:
            rec.update(measure_diversion(series, ev.server).to_record())
        out.append(rec)
    return out


def _prevention(series) -> float | None:
    try:
        return measure_degradation_prevention(series)
    except ValueError:
        return None


def _budget_summary(sim: Simulation, series) -> dict:
    sc = sim.scenario
    if sc.budgets is None:
        return {}
    budgets = {}
    for srv in sim.server_list:
        for (w, res), (budget, _, _) in srv.ledger.snapshot().items():
            budgets.setdefault(w, {})[res] = budget
    full = int(series.duration_ticks * sim.tick_ms // sim.series.budget_window_ms)
    per = {}
    for (w, label), ww in sorted(series.budget_windows.items()):
        per.setdefault(label, []).append((w, ww))
    out = {}
    servers = max(1, len(sim.server_list))
    for label, pairs in per.items():
        # the trailing partial window skews ratios; use it only if nothing else exists
        wins = [ww for w, ww in pairs if w < full] or [ww for _, ww in pairs]
        rec = {
            "windows": len(wins),
            "partial_only": not any(w < full for w, _ in pairs),
            "admissions": sum(x.admissions for x in wins),
            "rejections": sum(x.rejections for x in wins),
            "cancellations": sum(x.cancellations for x in wins),
            "kills": sum(x.kills for x in wins),
        }
        b = budgets.get(label)
        if b:
            # window records aggregate every host; budgets are per host
            cpu_cap, mem_cap = b["CPU"] * servers, b["MEM"] * servers
            rec["budget_cpu_ns"] = b["CPU"]
            rec["budget_mem_bytes"] = b["MEM"]
            rec["max_charged_cpu_ratio"] = max(x.charged_cpu / cpu_cap for x in wins)
            rec["max_charged_mem_ratio"] = max(x.charged_mem / mem_cap for x in wins)
            rec["mean_true_cpu_ratio"] = statistics.fmean(x.true_cpu / cpu_cap for x in wins)
            rec["mean_true_mem_ratio"] = statistics.fmean(x.true_mem / mem_cap for x in wins)
        out[label] = rec
    return out


def accounting_error(series) -> float | None:
    errs = []
    for sid, key, cpu, _ in series.sub_usage:
        if cpu > 0:
            errs.append(abs(series.accounted[(sid, key)][0] - cpu) / cpu)
    return statistics.fmean(errs) if errs else None


def _simulate(cfg: RunConfig, sc: Scenario):
    sim = Simulation(sc)
    series = sim.run()
    pct = series.latency_percentiles()
    summary = {
        "seed": sc.seed,
        "duration_ms": series.duration_ticks * sim.tick_ms,
        "census": series.census,
        "latency_ms": pct,
        "events": _event_summary(series, sc),
        "prevention_rate": _prevention(series) if sc.events else None,
        "budgets": _budget_summary(sim, series),
        "accounting_mean_abs_error": accounting_error(series) if sc.budgets else None,
        "rebalance": series.rebalance_audit,
    }
    return sim, series, summary


def _violations(series, sc: Scenario) -> list[str]:
    bad = []
    c = series.census
    if c.get("unaccounted"):
        bad.append(f"{c['unaccounted']} queries unaccounted for")
    audit = series.rebalance_audit
    if audit:
        t = sc.rebalance.threshold
        if t is None:
            t = sc.topology.replicas - 1
        if audit["routed_to_drained"]:
            bad.append(f"{audit['routed_to_drained']} sub-queries routed to drained hosts")
        if audit["min_serving"] < t:
            bad.append(f"serving replicas fell to {audit['min_serving']} < T={t}")
    return bad


def cmd_simulate(cfg: RunConfig) -> int:
    sc = _load_scenario(cfg)
    _, series, summary = _simulate(cfg, sc)
    series_t = Table("series", ["window_start_ms", "key", "metric", "value"], series.rows_tsv())
    arrivals = Table("arrivals", ["tick", "workload", "broker"], [list(a) for a in series.arrivals])
    rebalance = Table("rebalance_audit", ["step", "action", "hosts", "min_serving"],
                      [[r["step"], r["action"], r["hosts"], r["min_serving"]]
                       for r in series.rebalance_trace])
    bad = _violations(series, sc)
    summary["violations"] = bad
    extra = {"scenario.json": json.dumps(sc.to_json(), indent=2, sort_keys=True) + "\n"}
    emit_report(cfg.out, [series_t, arrivals, rebalance], summary, cfg.fmt, extra)
    return EXIT_INVARIANT if bad else EXIT_OK


def cmd_qwi_report(cfg: RunConfig) -> int:
    workloads = load_workload_configs(cfg.workloads) if cfg.workloads else None
    sc = _load_scenario(cfg, workloads)
    if sc.budgets is None:
        sc = sc.with_overrides(budgets=Budgets())
    sim, series, summary = _simulate(cfg, sc)
    table = Table("enforcement", ["window_start_ms", "workload", "admissions", "rejections",
                                  "cancellations", "kills", "charged_cpu_ns", "true_cpu_ns",
                                  "charged_mem_bytes", "true_mem_bytes"])
    for (w, label), ww in sorted(series.budget_windows.items()):
        table.rows.append([w * series.budget_window_ms, label, ww.admissions, ww.rejections,
                           ww.cancellations, ww.kills, ww.charged_cpu, ww.true_cpu,
                           ww.charged_mem, ww.true_mem])
    usage = Table("accounting", ["server", "query", "true_cpu_ns", "sampled_cpu_ns",
                                 "true_mem_bytes", "sampled_mem_bytes"])
    for sid, key, cpu, mem in series.sub_usage:
        acc = series.accounted[(sid, key)]
        usage.rows.append([sid, key, cpu, acc[0], mem, acc[1]])
    report = {k: summary[k] for k in ("seed", "duration_ms", "census", "budgets",
                                      "accounting_mean_abs_error")}
    bad = [
        f"{label}: charged CPU exceeded budget"
        for label, rec in report["budgets"].items()
        if rec.get("max_charged_cpu_ratio", 0) > 1 + 1e-9
    ]
    report["violations"] = bad
    extra = {"scenario.json": json.dumps(sc.to_json(), indent=2, sort_keys=True) + "\n"}
    emit_report(cfg.out, [table, usage], report, cfg.fmt, extra)
    return EXIT_INVARIANT if bad else EXIT_OK


COMMANDS = {
    "place": cmd_place,
    "rebalance": cmd_rebalance,
    "simulate": cmd_simulate,
    "qwi-report": cmd_qwi_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_PARSE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[cfg.subcommand](cfg)
    except ScenarioError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except (ValidationError, TopologyError, RebalanceError, json.JSONDecodeError,
            InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
