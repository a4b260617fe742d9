import statistics

import pytest

from olapres.sim import (
    ScenarioError,
    Simulation,
    dump_scenario,
    measure_degradation_prevention,
    measure_diversion,
    parse_scenario,
    parse_scenario_data,
    run,
)
from olapres.sim.metrics import nearest_rank


def scenario(**sections):
    base = {"workloads": [{"qps": 300, "base_latency_ms": 1.35}],
            "sim": {"duration_ms": 500}}
    base.update(sections)
    return parse_scenario_data(base)


def single_server(qps, duration_ms, events=(), seed=0, base_ms=1.0):
    return parse_scenario_data({
        "topology": {"brokers": 1, "replicas": 1, "threads_per_server": 1},
        "workloads": [{"qps": qps, "base_latency_ms": base_ms}],
        "events": list(events),
        "sim": {"duration_ms": duration_ms},
        "seed": seed,
    })


def completed_ticks(series):
    return [q.done - q.arrival for q in series.queries if q.status == "completed"]


class TestParsing:
    def test_minimal_defaults(self):
        sc = parse_scenario_data({})
        assert sc.sim.tick_ms == 0.1
        pol = sc.policy.selection_policy()
        assert pol.alpha == pytest.approx(2 / 3) and pol.exponent == 3 and pol.latency_prior_ms == 1.0

    def test_negative_qps_names_field(self):
        with pytest.raises(ScenarioError) as exc:
            parse_scenario_data({"workloads": [{"qps": -1}]})
        assert any(e.startswith("workloads.0.qps") for e in exc.value.errors)

    def test_zero_p_rejected(self):
        with pytest.raises(ScenarioError) as exc:
            parse_scenario_data({"events": [{"server": "s0-0", "start_ms": 0, "end_ms": 1, "p": 0}]})
        assert any("p" in e for e in exc.value.errors)

    def test_unknown_key_rejected(self):
        with pytest.raises(ScenarioError):
            parse_scenario_data({"topolgy": {}})

    def test_unknown_server_rejected(self):
        with pytest.raises(ScenarioError):
            parse_scenario_data({"events": [{"server": "s9-9", "start_ms": 0, "end_ms": 1, "p": 0.5}]})

    def test_round_trip(self, tmp_path):
        sc = scenario(seed=2**64 - 1, events=[{"server": "s0-1", "start_ms": 10, "end_ms": 20, "p": 0.5}])
        p = tmp_path / "s.json"
        dump_scenario(sc, p)
        assert parse_scenario(p) == sc

    def test_seed_must_fit_64_bits(self):
        with pytest.raises(ScenarioError):
            parse_scenario_data({"seed": 2**64})


class TestTickModel:
    def test_zero_qps_only_clock_moves(self):
        s = Simulation(scenario(workloads=[{"qps": 0}]))
        for _ in range(50):
            s.tick()
        series = s.finish()
        assert series.queries == [] and series.census["injected"] == 0
        assert series.duration_ticks == 50

    def test_single_query_ten_units(self):
        series = run(single_server(qps=1, duration_ms=1010))
        assert completed_ticks(series) == [12]

    def test_degraded_mean_completion(self):
        # one query every 20 ms, each alone on the server, degraded throughout
        ev = [{"server": "s0-0", "start_ms": 0, "end_ms": 30000, "p": 0.4}]
        work = []
        for seed in range(3):
            series = run(single_server(qps=50, duration_ms=30000, events=ev, seed=seed))
            work += [t - 2 for t in completed_ticks(series)]
        assert len(work) > 1000
        assert statistics.fmean(work) == pytest.approx(25, rel=0.10)

    def test_degraded_throughput_fraction(self):
        # a saturated single thread completes p times as many units
        ev = [{"server": "s0-0", "start_ms": 0, "end_ms": 5000, "p": 0.4}]
        healthy = len(completed_ticks(run(single_server(qps=2000, duration_ms=2000))))
        slow = len(completed_ticks(run(single_server(qps=2000, duration_ms=2000, events=ev))))
        assert slow / healthy == pytest.approx(0.4, rel=0.05)


class TestRunProperties:
    def test_seed_determinism(self):
        sc = scenario(policy={"mode": "softmax"}, sim={"duration_ms": 300, "arrivals": "poisson"})
        a, b = run(sc), run(sc)
        assert a.rows_tsv() == b.rows_tsv() and a.queries == b.queries

    def test_arrival_isolation(self):
        seqs, targets = [], []
        for scorer in ("round_robin", "hybrid"):
            sc = scenario(policy={"scorer": scorer}, sim={"duration_ms": 300, "arrivals": "poisson"},
                          events=[{"server": "s0-0", "start_ms": 50, "end_ms": 250, "p": 0.3}])
            series = run(sc)
            seqs.append(series.arrivals)
            targets.append([q.servers for q in series.queries])
        assert seqs[0] == seqs[1]
        assert targets[0] != targets[1]

    def test_conservation_every_tick(self):
        sc = scenario(workloads=[{"qps": 4000, "base_latency_ms": 1.35}],
                      budgets={"workloads": [{
                          "workloadName": "default",
                          "nodeConfigs": [{"nodeType": "SERVER",
                                           "enforcementProfile": {"cpuCostNs": 2e7, "memoryCostBytes": 1e12},
                                           "propagationScheme": {"type": "TABLE", "tables": ["table"]}}]}],
                               "window_ms": 50},
                      sim={"duration_ms": 200, "queue_cap": 20})
        s = Simulation(sc)
        for _ in range(s.n_ticks):
            s.tick()
            c = s.census()
            assert c["unaccounted"] == 0
            assert c["injected"] == (c["queued"] + c["executing"] + c["in_transit"]
                                     + c["completed"] + c["rejected"])
        series = s.finish()
        assert series.census["rejected"] > 0

    def test_window_sums_match_completions(self):
        series = run(scenario())
        assert sum(series.completed_per_window()) == len(series.completed())

    def test_hybrid_tiers_run(self):
        sc = scenario(workloads=[{"label": "fast", "qps": 2400, "base_latency_ms": 1},
                                 {"label": "mid", "qps": 200, "base_latency_ms": 10},
                                 {"label": "slow", "qps": 40, "base_latency_ms": 100}],
                      sim={"duration_ms": 300})
        series = run(sc)
        assert series.census["unaccounted"] == 0
        assert {q.workload for q in series.queries} == {"fast", "mid", "slow"}


class TestMeasures:
    def test_round_robin_never_diverts(self):
        sc = scenario(policy={"scorer": "round_robin"},
                      events=[{"server": "s0-0", "start_ms": 100, "end_ms": 400, "p": 0.4}])
        d = measure_diversion(run(sc), "s0-0")
        assert d.diversion_windows is None and d.recovery_ms is None

    def test_no_event_prevention_is_total(self):
        assert measure_degradation_prevention(run(scenario())) == 1.0

    def test_needs_one_event(self):
        with pytest.raises(ValueError):
            measure_diversion(run(scenario()), "s0-0")

    def test_nearest_rank(self):
        assert nearest_rank([5, 1, 3, 2, 4], 50) == 3
        assert nearest_rank([5, 1, 3, 2, 4], 99) == 5
        assert nearest_rank([], 50) is None


def test_rebalance_inside_simulation():
    desired = {}
    for i in range(2):
        for j in range(3):
            desired[f"s{i}-{j}"] = [f"seg{i}-{k}" for k in range(4)] + [f"seg{1 - i}-{j}"]
    sc = parse_scenario_data({
        "topology": {"replicas": 3, "mss_count": 2},
        "workloads": [{"qps": 600}],
        "rebalance": {"desired": desired, "start_ms": 100},
        "sim": {"duration_ms": 1500},
        "seed": 3,
    })
    series = run(sc)
    audit = series.rebalance_audit
    assert audit["steps_completed"] == audit["steps_total"] > 0
    assert audit["routed_to_drained"] == 0
    assert audit["min_serving"] >= 2
    assert series.census["unaccounted"] == 0 and series.census["rejected"] == 0
