"""The ten acceptance criteria, one test each.

Each test tags itself with ``record_property("criterion", ...)``; conftest
prints a PASS/FAIL line per criterion after the run.  Time limits are wall
clock on the test machine.
"""
import random
import time
from fractions import Fraction

import pytest

from corpus import oracle_counts, random_program
from zonesim.attacks import CONTROL, GOLDEN, run_scenario
from zonesim.cpi import (
    ADDR_MASK, INDEX_SENTINEL, CpiViolation, PimRegion, ThreadCpi, tag, tag_index, untag,
    untagged,
)
from zonesim.domains import CostModel, DomainId, Level, SwitchEntry, metrics
from zonesim.oracles import gpc_oracle, isolation_oracle, perm_oracle
from zonesim.program import binary_scan, count_inserted, instrument, parse_program
from zonesim.workload import WorkloadConfig, baseline_per_pas_gpt, simulate


@pytest.fixture
def criterion(record_property):
    def tag_(label):
        record_property("criterion", label)
    return tag_


def timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


def test_c01_permission_oracle(criterion):
    criterion("01 permission pipeline equals flag-wise AND oracle")
    rep, secs = timed(perm_oracle)
    assert rep.passed, rep.summary()
    assert rep.checked == 2048
    assert secs < 1.0


def test_c02_gpc_matrix(criterion):
    criterion("02 GPC matrix and bypass-window ownership")
    rep = gpc_oracle()
    assert rep.passed, rep.summary()
    assert rep.checked == 26
    res = run_scenario("cross_core_window")
    assert res.status == "blocked" and res.outcome == "GPF"


def test_c03_isolation_matrix(criterion):
    criterion("03 84-domain isolation matrix")
    rep, secs = timed(isolation_oracle, 3)
    assert rep.passed, rep.summary()
    assert rep.checked == 84 * 84
    assert secs < 10.0


def _pct(rep, level):
    return 100 * rep.rates[level]


def test_c04_hit_rate_bands(criterion):
    criterion("04 hit-rate bands and affinity dominance")
    t0 = time.perf_counter()
    r7, r28, r224 = (simulate(WorkloadConfig(domains_per_core=d)) for d in (7, 28, 224))
    assert time.perf_counter() - t0 < 30.0

    assert r7.rates["L1"] == 1.0
    assert r28.counts["L3"] == 0
    assert 95.8 <= _pct(r28, "L1") <= 98.8
    assert 95.0 <= _pct(r224, "L1") <= 98.0
    assert 1.2 <= _pct(r224, "L2") <= 4.2
    assert 0.0 <= _pct(r224, "L3") <= 2.3

    for d in (7, 28, 224):
        for seed in range(20):
            kw = dict(domains_per_core=d, interleave="random", seed=seed)
            aff = simulate(WorkloadConfig(alloc_policy="affinity", **kw))
            rr = simulate(WorkloadConfig(alloc_policy="round_robin", **kw))
            assert rr.rates["L1"] < aff.rates["L1"], (d, seed)


def test_c05_cost_accounting(criterion):
    criterion("05 cost accounting")
    costs = CostModel()
    assert (costs.l1_switch, costs.l2_switch, costs.l3_switch) == (74.13, 6169.47, 6173.36)
    table = {1: costs.l1_switch, 2: costs.l2_switch, 3: costs.l3_switch}
    avgs = []
    for d in (7, 14, 28, 56, 112, 224):
        for policy in ("affinity", "round_robin"):
            rep = simulate(WorkloadConfig(domains_per_core=d, alloc_policy=policy))
            n = sum(rep.counts.values())
            mean = sum(rep.counts[f"L{k}"] * table[k] for k in (1, 2, 3)) / n
            assert abs(rep.avg_switch_cycles - mean) < 1e-9
            assert abs(rep.avg_switch_cycles - rep.total_cycles / n) < 1e-9
            if policy == "affinity":
                avgs.append(rep.avg_switch_cycles)
    assert avgs == sorted(avgs)

    a, b, c = DomainId(0, 3, 1), DomainId(0, 3, 2), DomainId(0, 6, 1)
    trace = ([SwitchEntry(0, a, b, costs.l1_switch)] * 97
             + [SwitchEntry(0, a, c, costs.l2_switch)] * 3)
    m = metrics(trace)
    assert m.counts[Level.L1] == 97 and m.counts[Level.L2] == 3
    assert m.avg_cycles == float((97 * Fraction(74.13) + 3 * Fraction(6169.47)) / 100)


def test_c06_baseline_memory(criterion):
    criterion("06 per-zone GPT clone baseline memory")
    cost = baseline_per_pas_gpt(25, 4096)
    assert cost["extra_gpt_bytes"] == 100 * 1024
    assert cost["window_clones"] == 0


def test_c07_cpi_fuzz(criterion):
    criterion("07 CPI bit-flip fuzz and tag round trip")
    t0 = time.perf_counter()
    rng = random.Random(7)
    t = ThreadCpi(PimRegion(base=0x2000000, capacity=4096))
    sigs = ["void(int)", "int(char*)", "void(void*,size_t)", "long(long)"]
    vals = [t.backup(untagged(0x400000 + 0x40 * i), sigs[i % 4]) for i in range(256)]
    detected = 0
    for _ in range(10_000):
        i = rng.randrange(len(vals))
        try:
            t.check(vals[i] ^ (1 << rng.randrange(64)), sigs[i % 4])
        except CpiViolation:
            detected += 1
    assert detected == 10_000
    for _ in range(10_000):
        i = rng.randrange(len(vals))
        assert t.check(vals[i], sigs[i % 4]) == 0x400000 + 0x40 * i
    for _ in range(100_000):
        p, idx = rng.randrange(ADDR_MASK + 1), rng.randrange(INDEX_SENTINEL)
        v = tag(p, idx)
        assert untag(v) == p and tag_index(v) == idx
    assert time.perf_counter() - t0 < 10.0


def test_c08_attack_suite(criterion):
    criterion("08 golden attack scenarios blocked, benign clean")
    for name in GOLDEN:
        res = run_scenario(name)
        assert res.status == "blocked" and res.outcome == res.expected, name
    benign = run_scenario(CONTROL)
    assert benign.status == "completed" and benign.faults == 0


def test_c09_monitor_round_trip(criterion):
    criterion("09 monitor save/tamper/restore is identity")
    from test_monitor import test_round_trip_is_identity
    test_round_trip_is_identity()


def test_c10_instrumentation(criterion):
    criterion("10 instrumentation counts and idempotence")
    for seed in range(20):
        text = random_program(seed)
        prog = parse_program(text)
        backups, checks, gcs, por = oracle_counts(text)
        inst = instrument(prog)
        counts = count_inserted(prog, inst)
        assert (counts.backups, counts.checks) == (backups, checks), seed
        assert instrument(inst) == inst
        scanned, rep = binary_scan(inst)
        assert (rep.gcs_rewrites, rep.por_removed) == (gcs, por)
        again, rep2 = binary_scan(scanned)
        assert again == scanned and rep2.rewrites == 0
