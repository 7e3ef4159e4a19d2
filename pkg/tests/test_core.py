import pytest

from zonesim.core import (
    GPF, AccessKind, Mode, PermFault, PrivilegeError, RngTrapDisabled, TranslationFault,
    read_rng, user_write_por,
)
from zonesim.domains import DomainId, enter_overlay, revoke
from zonesim.gpt import SecurityState
from zonesim.world import HEAP_PHYS, World, WorldConfig

A, B = DomainId(0, 6, 1), DomainId(0, 6, 2)


@pytest.fixture
def world():
    w = World(WorldConfig(cores=2, n_pas=2))
    w.map_domain(A)
    w.map_domain(B)
    w.monitor.preload_domain(w.cores[0], A)
    enter_overlay(w.cores[0], A.poe)
    return w


def acc(w, d, kind=AccessKind.READ, core=0, mode=Mode.USER):
    return w.machine.access(w.cores[core], w.aspace, w.domain_vaddr(d), kind, mode)


def test_own_domain_ok(world):
    assert acc(world, A) is None
    assert acc(world, A, AccessKind.WRITE) is None


def test_sibling_domain_perm_fault(world):
    f = acc(world, B)
    assert isinstance(f, PermFault) and f.stage == "perm" and f.kind == "PermFault"


def test_unmapped_is_translation_fault(world):
    f = world.machine.access(world.cores[0], world.aspace, 0x7777 * 4096, AccessKind.READ)
    assert isinstance(f, TranslationFault) and f.stage == "walk"


def test_exec_follows_the_enabled_domain(world):
    assert acc(world, A, AccessKind.EXEC) is None
    assert isinstance(acc(world, B, AccessKind.EXEC), PermFault)


def test_kernel_read_of_delegated_granule_gpf(world):
    core = world.cores[0]
    saved = world.monitor.intercept_trap(core, "syscall")
    f = world.kernel_access(core, world.kernel_alias(HEAP_PHYS), AccessKind.READ)
    assert isinstance(f, GPF) and f.stage == "gpc" and f.label == "no-access"
    world.monitor.resume_process(core, saved)


def test_kernel_mode_skips_perm_but_not_gpc(world):
    # the kernel alias of a zone page bypasses PIE/POE yet the proc GPT still says NoAccess
    core = world.cores[1]
    pte = world.aspace.lookup(world.domain_vpage(B))
    f = world.kernel_access(core, world.kernel_alias(pte.phys_page), AccessKind.READ)
    assert isinstance(f, GPF)


def test_monitor_mode_uses_root_state(world):
    core = world.cores[0]
    pte = world.aspace.lookup(world.domain_vpage(B))
    vaddr = world.kernel_alias(pte.phys_page)
    assert world.machine.access(core, world.kernel_aspace, vaddr, AccessKind.READ, Mode.MONITOR) is None
    assert core.security_state is SecurityState.NORMAL


def test_overlay_set_and_revoke(world):
    core = world.cores[0]
    user_write_por(core, B.poe, 0b0111)
    assert acc(world, B) is None
    user_write_por(core, 0, 0)
    assert core.por[0] == 0b0111
    revoke(core)
    assert acc(world, A) is not None and acc(world, B) is not None
    assert core.domain == A


def test_disabled_poe_stops_enforcing(world):
    core = world.cores[0]
    assert acc(world, B) is not None
    core.set_feature("poe_on", False, Mode.MONITOR)
    assert acc(world, B) is None


def test_user_cannot_touch_privileged_state(world):
    core = world.cores[0]
    with pytest.raises(PrivilegeError):
        core.set_tpidrro(1, Mode.USER)
    with pytest.raises(PrivilegeError):
        core.set_feature("gcs_on", False, Mode.USER)
    assert core.features.all_on()


def test_gcs_page_only_gcs_store(world):
    core = world.cores[0]
    pim = world.symbols()["pim"]
    m = world.machine
    assert m.access(core, world.aspace, pim, AccessKind.READ) is None
    assert isinstance(m.access(core, world.aspace, pim, AccessKind.WRITE), PermFault)
    assert m.access(core, world.aspace, pim, AccessKind.GCS_STORE) is None
    heap = world.symbols()["heap"]
    assert isinstance(m.access(core, world.aspace, heap, AccessKind.GCS_STORE), PermFault)


def test_rng_trap(world):
    core = world.cores[0]
    trap = read_rng(core)
    assert trap.gpt_base == core.gpt_base and trap.mode is Mode.USER
    core.set_feature("rng_trap_on", False, Mode.MONITOR)
    with pytest.raises(RngTrapDisabled):
        read_rng(core)


def test_store_then_load(world):
    m, core = world.machine, world.cores[0]
    va = world.domain_vaddr(A, offset=64)
    assert m.store(core, world.aspace, va, 99) is None
    assert m.load(core, world.aspace, va) == (99, None)
    val, fault = m.load(core, world.aspace, world.domain_vaddr(B))
    assert val is None and isinstance(fault, PermFault)
