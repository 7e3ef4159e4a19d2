from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from zonesim.domains import (
    DOMAINS_PER_PAS, AffinityAllocator, CostModel, DomainId, EmptyTrace, Exhausted, Level,
    RoundRobinAllocator, SwitchEntry, SwitchRejected, Universe, classify_switch, metrics,
    switch_domain,
)
from zonesim.world import World, WorldConfig

C = CostModel()


def test_classify_examples():
    a = DomainId(0, 6, 1)
    assert classify_switch(a, DomainId(0, 6, 2)) is Level.L1
    assert classify_switch(a, DomainId(0, 3, 1)) is Level.L2
    assert classify_switch(a, DomainId(1, 6, 1)) is Level.L3
    assert classify_switch(None, a) is Level.L3


def test_table_costs():
    assert (C.l1_switch, C.l2_switch, C.l3_switch) == (74.13, 6169.47, 6173.36)
    assert (C.ptr_backup, C.ptr_check) == (18.02, 11.07)
    assert C.switch_cost(Level.L2) == 6169.47
    with pytest.raises(ValueError):
        CostModel(l1_switch=-1)


def test_domain_id_rules():
    with pytest.raises(ValueError):
        DomainId(0, 6, 0)
    with pytest.raises(ValueError):
        DomainId(0, 11, 1).validate()
    DomainId(0, 9, 7).validate()


def test_universe_order():
    u = Universe(3)
    assert len(u) == 84 and u.per_pas == DOMAINS_PER_PAS
    assert u.domain(0) == DomainId(0, 3, 1)
    assert u.domain(6) == DomainId(0, 3, 7)
    assert u.domain(7) == DomainId(0, 6, 1)
    assert u.domain(28) == DomainId(1, 3, 1)
    assert all(u.index(u.domain(i)) == i for i in range(84))
    assert len({(d.pie, d.poe) for d in map(u.domain, range(28))}) == 28


def test_round_robin_counter_oracle():
    alloc = RoundRobinAllocator(Universe(2))
    for c in range(1, 8):
        assert alloc.assign(c, (c - 1) % 2) == DomainId(0, 3, c)
    for c in range(8, 29):
        alloc.assign(c, 0)
    assert alloc.assign(29, 0) == DomainId(1, 3, 1)
    assert alloc.assign(5, 1) == DomainId(0, 3, 5)


def test_round_robin_exhausted_and_reuse():
    alloc = RoundRobinAllocator(Universe(1))
    for c in range(28):
        alloc.assign(c)
    with pytest.raises(Exhausted):
        alloc.assign(99)
    alloc.release(10)
    alloc.release(3)
    assert alloc.assign(100) == Universe(1).domain(3)


def test_affinity_blocks_are_private():
    u = Universe(4)
    alloc = AffinityAllocator(u)
    seen = {0: set(), 1: set()}
    for c in range(1, 113):
        w = (c - 1) % 2
        seen[w].add(alloc.assign(c, w).pas)
    assert seen[0].isdisjoint(seen[1])
    assert seen[0] == {0, 2} and seen[1] == {1, 3}


def test_affinity_first_block_never_l3():
    alloc = AffinityAllocator(Universe(4))
    ds = [alloc.assign(c, 0) for c in range(28)]
    assert all(classify_switch(a, b) is not Level.L3 for a, b in zip(ds, ds[1:]))
    nxt = alloc.assign(28, 0)
    assert nxt.pas != ds[-1].pas and classify_switch(ds[-1], nxt) is Level.L3
    assert nxt == DomainId(nxt.pas, 3, 1)


def test_affinity_reuses_lowest_freed():
    alloc = AffinityAllocator(Universe(2))
    ds = [alloc.assign(c, 0) for c in range(10)]
    alloc.release(7)
    alloc.release(2)
    assert alloc.assign(50, 0) == ds[2]
    assert alloc.assign(51, 0) == ds[7]


def test_affinity_exhausted():
    alloc = AffinityAllocator(Universe(1))
    alloc.assign(1, 0)
    with pytest.raises(Exhausted):
        alloc.assign(2, 1)


@given(st.lists(st.tuples(st.integers(1, 40), st.integers(0, 2)), max_size=80))
def test_allocators_sticky(ops):
    for cls in (RoundRobinAllocator, AffinityAllocator):
        alloc = cls(Universe(6))
        first = {}
        for conn, worker in ops:
            d = alloc.assign(conn, worker)
            assert first.setdefault(conn, d) == d


def test_metrics_synthetic_97_3():
    d1, d1b, d2 = DomainId(0, 3, 1), DomainId(0, 3, 2), DomainId(0, 6, 1)
    entries = [SwitchEntry(0, d1, d1b, C.l1_switch)] * 97 + [SwitchEntry(0, d1, d2, C.l2_switch)] * 3
    m = metrics(entries)
    assert m.counts[Level.L1] == 97 and m.counts[Level.L2] == 3
    assert m.avg_cycles == float((97 * Fraction(74.13) + 3 * Fraction(6169.47)) / 100)
    assert abs(m.avg_cycles - (97 * 74.13 + 3 * 6169.47) / 100) < 1e-9


def test_metrics_empty():
    with pytest.raises(EmptyTrace):
        metrics([])


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1), st.integers(1, 2)), min_size=1,
                max_size=300))
def test_weighted_mean_equals_arithmetic_mean(moves):
    entries = []
    src = DomainId(0, 3, 1)
    for pas, pie_i, poe in moves:
        dst = DomainId(pas, (3, 6)[pie_i], poe)
        entries.append(SwitchEntry(0, src, dst, C.switch_cost(classify_switch(src, dst))))
        src = dst
    m = metrics(entries)
    exact = sum(Fraction(e.cycles) for e in entries) / len(entries)
    assert m.avg_cycles == float(exact)
    assert abs(m.l1_rate + m.l2_rate + m.l3_rate - 1) < 1e-12


def test_switch_through_monitor():
    w = World(WorldConfig(cores=1, n_pas=2))
    core = w.cores[0]
    a, b, c = DomainId(0, 6, 1), DomainId(0, 3, 1), DomainId(1, 3, 1)
    assert switch_domain(core, a, w.monitor).level is Level.L3
    assert switch_domain(core, DomainId(0, 6, 2), w.monitor).cycles == 74.13
    e = switch_domain(core, b, w.monitor)
    assert e.level is Level.L2 and core.pire[6] == 0 and core.pire[3] == 0b0111
    assert switch_domain(core, c, w.monitor).level is Level.L3
    assert core.windows == [w.proc.zones[1].window]


def test_switch_rejections():
    w = World(WorldConfig(cores=1, n_pas=1))
    core = w.cores[0]
    with pytest.raises(SwitchRejected) as ei:
        switch_domain(core, DomainId(0, 3, 1), w.monitor, via="inline")
    assert ei.value.reason == "NotTrampoline"
    with pytest.raises(SwitchRejected) as ei:
        switch_domain(core, DomainId(5, 3, 1), w.monitor)
    assert ei.value.reason == "IllegalWindow"
    with pytest.raises(SwitchRejected) as ei:
        switch_domain(core, DomainId(0, 11, 1), w.monitor)
    assert ei.value.reason == "BadPie"
