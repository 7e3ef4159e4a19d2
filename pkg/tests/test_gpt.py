import random

import pytest
from hypothesis import given, strategies as st

from zonesim.gpt import (
    DEFAULT_ACCESS, GiB, BypassWindow, Gpt, InvalidRange, IntervalMap, NotRoot, PasLabel,
    SecurityState, gpc_check, window_covers,
)

ROOT, NORMAL = SecurityState.ROOT, SecurityState.NORMAL


def test_default_label_is_normal():
    g = Gpt("g")
    assert g.label(12345) is PasLabel.NORMAL
    assert gpc_check(g, NORMAL, 0) is None


def test_root_only_writer():
    g = Gpt("g")
    with pytest.raises(NotRoot):
        g.set_pas(0, 1, PasLabel.SECURE, NORMAL)
    with pytest.raises(InvalidRange):
        g.set_pas(5, 5, PasLabel.SECURE, ROOT)


def test_granule_size_power_of_two():
    with pytest.raises(ValueError):
        Gpt("g", 3000)


def test_no_access_faults_normal_world_with_granule():
    g = Gpt("g")
    g.set_pas(0, 256, PasLabel.NO_ACCESS, ROOT)
    f = gpc_check(g, NORMAL, 17 * 4096 + 5)
    assert f is not None and f.granule == 17 and f.label is PasLabel.NO_ACCESS


def test_window_overrides_no_access():
    g = Gpt("g")
    g.set_pas(0, 1 << 20, PasLabel.NO_ACCESS, ROOT)
    w = BypassWindow(GiB, GiB)
    assert gpc_check(g, NORMAL, GiB + 10, [w]) is None
    assert gpc_check(g, NORMAL, 10, [w]) is not None


@pytest.mark.parametrize("label", list(PasLabel))
def test_root_world_reaches_everything(label):
    g = Gpt("g")
    g.set_pas(0, 1, label, ROOT)
    assert gpc_check(g, ROOT, 0) is None


@pytest.mark.parametrize("state", [s for s in SecurityState if s is not ROOT])
def test_fixed_rules_for_non_root(state):
    g = Gpt("g")
    g.set_pas(0, 1, PasLabel.FULL_ACCESS, ROOT)
    g.set_pas(1, 2, PasLabel.NO_ACCESS, ROOT)
    g.set_pas(2, 3, PasLabel.ROOT, ROOT)
    assert gpc_check(g, state, 0) is None
    assert gpc_check(g, state, 4096) is not None
    assert gpc_check(g, state, 8192) is not None


def test_matrix_consulted_for_world_labels():
    g = Gpt("g")
    g.set_pas(0, 1, PasLabel.REALM, ROOT)
    assert gpc_check(g, NORMAL, 0) is not None
    assert gpc_check(g, SecurityState.REALM, 0) is None
    open_matrix = dict(DEFAULT_ACCESS)
    open_matrix[NORMAL] = frozenset(PasLabel)
    assert gpc_check(g, NORMAL, 0, matrix=open_matrix) is None


def test_window_examples():
    w = BypassWindow(GiB, GiB)
    assert w.covers(GiB + GiB // 2)
    assert not w.covers(2 * GiB)


@pytest.mark.parametrize("base,size,scale", [
    (0, 3 * GiB, 1), (0, GiB // 2, 1), (0, 128 * GiB, 1), (GiB // 2, GiB, 1), (0, GiB, 2 * 1024),
])
def test_window_bounds(base, size, scale):
    with pytest.raises(ValueError):
        BypassWindow(base, size, scale)


def test_window_scale_keeps_ratio():
    BypassWindow(0, GiB // 64, 64)
    BypassWindow(0, GiB, 64)
    with pytest.raises(ValueError):
        BypassWindow(0, 2 * GiB, 64)


def test_window_random_vs_interval_oracle():
    rng = random.Random(7)
    for _ in range(10_000):
        size = GiB << rng.randrange(7)
        base = size * rng.randrange(8)
        addr = rng.randrange(0, 16 * 64 * GiB)
        w = BypassWindow(base, size)
        assert window_covers([w], addr) == (base <= addr < base + size)


@given(st.lists(st.tuples(st.integers(0, 60), st.integers(1, 20),
                          st.sampled_from(list(PasLabel))), max_size=25))
def test_relabel_last_writer_wins(ops):
    g = Gpt("g")
    ref = {}
    for start, length, label in ops:
        g.set_pas(start, start + length, label, ROOT)
        for i in range(start, start + length):
            ref[i] = label
    for i in range(90):
        assert g.label(i) is ref.get(i, PasLabel.NORMAL)


def test_interval_map_is_sparse():
    m = IntervalMap(PasLabel.NORMAL)
    m.assign(0, 1 << 40, PasLabel.NO_ACCESS)
    m.assign(10, 20, PasLabel.NORMAL)
    assert len(m.runs()) == 2
    m.assign(10, 20, PasLabel.NO_ACCESS)
    assert m.runs() == [(0, 1 << 40, PasLabel.NO_ACCESS)]


def test_clone_is_independent():
    g = Gpt("a")
    g.set_pas(0, 4, PasLabel.SECURE, ROOT)
    c = g.clone("b")
    c.set_pas(0, 4, PasLabel.NORMAL, ROOT)
    assert g.label(0) is PasLabel.SECURE and c.label(0) is PasLabel.NORMAL
