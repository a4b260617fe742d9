import json
import random
import threading

import pytest
from pydantic import ValidationError

from olapres.budget import (
    BudgetLedger,
    HostInfo,
    Resource,
    SampleAccountant,
    ThreadSlot,
    UnknownWorkload,
    Usage,
    UsageSnapshot,
    WorkloadConfig,
    admit_query,
    enforce_thread_deltas,
    kill_policy,
    load_workload_configs,
    propagate_budgets,
)

CPU, MEM = Resource.CPU, Resource.MEM


def config(name="w", cpu=100.0, mem=100.0, node="SERVER", scheme=None):
    return WorkloadConfig.model_validate({
        "workloadName": name,
        "nodeConfigs": [{
            "nodeType": node,
            "enforcementProfile": {"cpuCostNs": cpu, "memoryCostBytes": mem},
            "propagationScheme": scheme or {"type": "TABLE", "tables": ["tableA"]},
        }],
    })


def ledger(cpu=100.0, mem=100.0, **kw):
    led = BudgetLedger(**kw)
    led.add_or_update_workload(config(cpu=cpu, mem=mem))
    return led


class TestTryCharge:
    def test_accept(self):
        led = ledger()
        assert led.try_charge("w", CPU, 60)
        assert led.remaining("w", CPU) == 40

    def test_reject_leaves_remaining(self):
        led = ledger()
        led.try_charge("w", CPU, 60)
        assert not led.try_charge("w", CPU, 50)
        assert led.remaining("w", CPU) == 40

    def test_zero_always_accepted(self):
        led = ledger(cpu=1.0)
        led.try_charge("w", CPU, 1.0)
        assert led.try_charge("w", CPU, 0.0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            ledger().try_charge("w", CPU, -1)

    def test_unknown_workload_exempt_or_strict(self):
        assert ledger().try_charge("other", CPU, 1e18)
        with pytest.raises(UnknownWorkload):
            ledger(strict=True).try_charge("other", CPU, 1)

    def test_concurrent_never_overcommits(self):
        for seed in range(20):
            rng = random.Random(seed)
            led = ledger(cpu=1000.0)
            amounts = [rng.uniform(0, 40) for _ in range(400)]
            accepted = []
            lock = threading.Lock()

            def worker(chunk):
                for a in chunk:
                    if led.try_charge("w", CPU, a):
                        with lock:
                            accepted.append(a)

            threads = [threading.Thread(target=worker, args=(amounts[k::8],)) for k in range(8)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert sum(accepted) <= 1000.0 + 1e-9
            assert led.remaining("w", CPU) == pytest.approx(1000.0 - sum(accepted))
            assert led.remaining("w", CPU) >= 0


class TestWorkloadUpdates:
    def test_idempotent(self):
        a, b = BudgetLedger(), BudgetLedger()
        a.add_or_update_workload(config())
        b.add_or_update_workload(config())
        b.add_or_update_workload(config())
        assert a.snapshot() == b.snapshot()

    def test_raise_adds_delta(self):
        led = ledger()
        led.try_charge("w", CPU, 70)
        led.add_or_update_workload(config(cpu=200.0))
        assert led.remaining("w", CPU) == 130

    def test_lower_clamps(self):
        led = ledger()
        led.add_or_update_workload(config(cpu=20.0))
        assert led.remaining("w", CPU) == 20

    def test_other_node_type_ignored(self):
        led = BudgetLedger(node_type="BROKER")
        assert not led.add_or_update_workload(config())
        assert led.workloads() == []


class TestAdmission:
    def test_ample(self):
        assert admit_query(ledger(), "w", 10, 10)

    def test_cpu_exhausted_leaves_mem(self):
        led = ledger()
        assert not admit_query(led, "w", 200, 10)
        assert led.remaining("w", MEM) == 100 and led.rejections["w"] == 1

    def test_mem_exhausted_refunds_cpu(self):
        led = ledger()
        before = led.snapshot()
        assert not admit_query(led, "w", 10, 200)
        assert led.snapshot() == before

    def test_thread_deltas(self):
        led = ledger()
        assert enforce_thread_deltas(led, "w", 10, 10)
        assert not enforce_thread_deltas(led, "w", 500, 10)
        assert led.remaining("w", MEM) == 90
        before = led.snapshot()
        assert enforce_thread_deltas(led, "w", 0, 0)
        assert led.snapshot() == before


class TestWindows:
    def test_mid_window(self):
        led = ledger(window_ms=1000)
        led.try_charge("w", CPU, 50)
        led.window_reset(999)
        assert led.remaining("w", CPU) == 50

    def test_exact_boundary(self):
        led = ledger(window_ms=1000)
        led.try_charge("w", CPU, 50)
        led.window_reset(1000)
        assert led.remaining("w", CPU) == 100

    def test_no_banking(self):
        led = ledger(window_ms=1000)
        led.try_charge("w", CPU, 50)
        led.window_reset(2500)
        budget, remaining, start = led.snapshot()[("w", "CPU")]
        assert remaining == 100 == budget and start == 2000

    def test_monotone_within_window(self):
        led = ledger(cpu=1e6, window_ms=1000)
        rng = random.Random(1)
        last = led.remaining("w", CPU)
        for t in range(900):
            led.try_charge("w", CPU, rng.uniform(0, 3000), now=float(t))
            cur = led.remaining("w", CPU)
            assert cur <= last
            last = cur

    def test_host_local(self):
        hosts = {f"h{k}": ledger() for k in range(4)}
        before = {h: led.snapshot() for h, led in hosts.items() if h != "h0"}
        while hosts["h0"].try_charge("w", CPU, 7):
            pass
        assert {h: led.snapshot() for h, led in hosts.items() if h != "h0"} == before


class TestPropagation:
    def topo(self):
        hosts = {f"s{k}": HostInfo("SERVER", frozenset({"tableA" if k < 3 else "tableB"}), "t1")
                 for k in range(10)}
        hosts["b0"] = HostInfo("BROKER", frozenset({"tableA"}), "t1")
        return hosts

    def test_table(self):
        out = propagate_budgets(config(), self.topo())
        assert sorted(out.budgets) == ["s0", "s1", "s2"]
        assert set(out.budgets.values()) == {(100.0, 100.0)}

    def test_tenant(self):
        out = propagate_budgets(config(scheme={"type": "TENANT", "tenant": "t1"}), self.topo())
        assert len(out.budgets) == 10

    def test_no_match_warns(self):
        out = propagate_budgets(config(scheme={"type": "TABLE", "tables": ["zzz"]}), self.topo())
        assert out.budgets == {} and out.warnings


class TestConfig:
    def test_file_round_trip(self, tmp_path):
        c = config()
        p = tmp_path / "w.json"
        p.write_text(json.dumps(c.to_json()))
        assert load_workload_configs(p) == [c]

    def test_rejects_bad_budget(self):
        with pytest.raises(ValidationError):
            config(cpu=0.0)

    def test_rejects_unknown_key(self):
        with pytest.raises(ValidationError):
            WorkloadConfig.model_validate({"workloadName": "w", "nodeConfigs": [], "x": 1})

    def test_rejects_duplicate_node_type(self):
        node = config().model_dump(by_alias=True)["nodeConfigs"][0]
        with pytest.raises(ValidationError):
            WorkloadConfig.model_validate({"workloadName": "w", "nodeConfigs": [node, node]})


class TestSampling:
    def test_hand_trace(self):
        acc = SampleAccountant(usage_threshold=lambda heap: True)
        t1 = ThreadSlot(1)
        t1.install(("q1", "k1"))
        t1.record(10, 0)
        snap = acc.sample_and_aggregate([t1])
        assert acc.active_metric[1].cpu_ns == 10 and acc.inactive_metric == {}
        assert snap.active_query_usage["q1"].cpu_ns == 10

        t1.install(("q1", "k2"))
        t1.record(4, 0)
        snap = acc.sample_and_aggregate([t1])
        assert acc.inactive_metric["q1"].cpu_ns == 10
        assert acc.active_metric[1].cpu_ns == 4
        assert snap.active_query_usage["q1"].cpu_ns == 14

        t1.task = None
        acc.sample_and_aggregate([t1])
        acc.sample_and_aggregate([t1])
        assert "q1" not in acc.inactive_metric
        assert acc.accounted("q1").cpu_ns == 14

    def test_threads_on_same_query_accumulate(self):
        acc = SampleAccountant(usage_threshold=lambda heap: True)
        slots = [ThreadSlot(k) for k in range(3)]
        for k, s in enumerate(slots):
            s.install(("q", f"t{k}"))
            s.record(5, 1)
        snap = acc.sample_and_aggregate(slots)
        assert snap.active_query_usage["q"] == Usage(15, 3)

    def test_no_snapshot_below_threshold(self):
        acc = SampleAccountant()
        assert acc.sample_and_aggregate([ThreadSlot(0)], heap_fraction=0.5) is None
        assert acc.sample_and_aggregate([ThreadSlot(0)], heap_fraction=0.9) is not None

    def test_exact_when_interval_divides_tasks(self):
        # tasks of 4 units sampled every 2 units lose nothing
        acc = SampleAccountant()
        slot = ThreadSlot(0)
        for task in range(5):
            slot.install(("q", f"t{task}"))
            for unit in range(4):
                slot.record(1, 0)
                if unit % 2 == 1:
                    acc.sample_and_aggregate([slot])
        slot.task = None
        acc.sample_and_aggregate([slot])
        assert acc.accounted("q").cpu_ns == 20


class TestKill:
    def test_one_tier(self):
        snap = UsageSnapshot({"q1": Usage(0, 5), "q2": Usage(0, 9)}, 0.86)
        assert kill_policy(snap) == {"q2"}

    def test_all_tier(self):
        snap = UsageSnapshot({q: Usage(0, 1) for q in ("a", "b", "c")}, 0.99)
        assert kill_policy(snap) == {"a", "b", "c"}

    def test_low_heap(self):
        assert kill_policy(UsageSnapshot({"a": Usage(0, 1)}, 0.5)) == set()

    def test_tie_by_id(self):
        assert kill_policy(UsageSnapshot({"b": Usage(0, 2), "a": Usage(0, 2)}, 0.9)) == {"a"}

    def test_tiers_nest(self):
        rng = random.Random(2)
        for _ in range(100):
            usage = {f"q{k}": Usage(0, rng.randint(0, 5)) for k in range(rng.randint(1, 6))}
            assert kill_policy(UsageSnapshot(usage, 0.85)) <= kill_policy(UsageSnapshot(usage, 0.99))
