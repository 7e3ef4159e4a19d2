"""Exhaustive brute-force checks of the permission, GPC and isolation layers.

Each suite compares the simulator against an independently written
expectation and returns an :class:`OracleReport`.  The expectations here
deliberately avoid the simulator's own decoding helpers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

from .core import AccessKind, AddressSpace, Machine, Mode
from .domains import switch_domain
from .gpt import DEFAULT_ACCESS, BypassWindow, Gpt, PasLabel, SecurityState
from .perm import GCS_PIE_INDEX, PageTableEntry
from .world import World, WorldConfig

ROOT = SecurityState.ROOT
DATA_KINDS = (AccessKind.READ, AccessKind.WRITE, AccessKind.EXEC)
ALL_KINDS = DATA_KINDS + (AccessKind.GCS_STORE,)


@dataclass
class OracleReport:
    suite: str
    checked: int = 0
    failures: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def counterexample(self) -> Optional[str]:
        return self.failures[0] if self.failures else None

    def summary(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        line = f"{self.suite}: {state} ({self.checked} checked, {len(self.failures)} failed)"
        if self.failures:
            line += f"\n  first counterexample: {self.failures[0]}"
        return line


# -- permissions -----------------------------------------------------------

def _bits_allow(enc: int, kind: AccessKind) -> bool:
    bit = {AccessKind.READ: 0, AccessKind.EXEC: 1, AccessKind.WRITE: 2}[kind]
    return bool(enc >> bit & 1)


def expected_user_access(base: int, overlay: int, kind: AccessKind, gcs_page: bool) -> bool:
    if gcs_page:
        return kind in (AccessKind.READ, AccessKind.GCS_STORE)
    if kind is AccessKind.GCS_STORE:
        return False
    return _bits_allow(base, kind) and _bits_allow(overlay, kind)


def perm_oracle() -> OracleReport:
    """All 256 (base, overlay) pairs, data and GCS pages, through ``Machine.access``."""
    rep = OracleReport("perm")
    m = Machine(1)
    core = m.cores[0]
    gpt = m.register_gpt(Gpt("flat", m.page_size))
    gpt.set_pas(0, 4, PasLabel.FULL_ACCESS, ROOT)
    core.gpt_base = gpt.id
    aspace = AddressSpace(owner=1)
    data_pie, poe = 3, 1
    aspace.map(PageTableEntry(0, 1, pie_idx=data_pie, poe_idx=poe))
    aspace.map(PageTableEntry(1, 2, pie_idx=GCS_PIE_INDEX, poe_idx=poe))
    for base in range(16):
        for overlay in range(16):
            core.pire[data_pie] = base
            core.pire[GCS_PIE_INDEX] = base
            core.por[poe] = overlay
            for vpage, gcs in ((0, False), (1, True)):
                for kind in ALL_KINDS:
                    got = m.access(core, aspace, vpage * m.page_size, kind) is None
                    want = expected_user_access(base, overlay, kind, gcs)
                    rep.checked += 1
                    if got != want:
                        page = "gcs" if gcs else "data"
                        rep.failures.append(
                            f"base={base:#06b} overlay={overlay:#06b} {page} {kind.value}: "
                            f"simulator {'allows' if got else 'denies'}, oracle "
                            f"{'allows' if want else 'denies'}")
    return rep


# -- granule protection ----------------------------------------------------

STATES = (SecurityState.NORMAL, SecurityState.SECURE, SecurityState.REALM, SecurityState.ROOT)
LABELS = tuple(PasLabel)


def gpc_oracle(table: Optional[Mapping[SecurityState, frozenset]] = None) -> OracleReport:
    """Every (state, label) case against ``table``, plus bypass-window ownership.

    The simulator runs with ``table`` as its configured matrix; a table that
    contradicts the fixed hardware rules (root sees everything, FullAccess is
    open, NoAccess and Root labels are closed to the other states) shows up
    as a counterexample.
    """
    table = dict(DEFAULT_ACCESS if table is None else table)
    rep = OracleReport("gpc")
    m = Machine(2, matrix=table)
    gpt = m.register_gpt(Gpt("oracle", m.page_size))
    aspace = AddressSpace(owner=0)
    for i, label in enumerate(LABELS):
        gpt.set_pas(i, i + 1, label, ROOT)
        aspace.map(PageTableEntry(i, i))
    core = m.cores[0]
    core.gpt_base = gpt.id
    for state in STATES:
        core.security_state = state
        for i, label in enumerate(LABELS):
            got = m.access(core, aspace, i * m.page_size, AccessKind.READ, Mode.KERNEL) is None
            want = label in table.get(state, frozenset())
            rep.checked += 1
            if got != want:
                rep.failures.append(f"{state.value} -> {label.value}: simulator "
                                    f"{'allows' if got else 'faults'}, table says "
                                    f"{'allow' if want else 'deny'}")
    _window_cases(rep)
    return rep


def _window_cases(rep: OracleReport) -> None:
    m = Machine(2)
    gpt = m.register_gpt(Gpt("win", m.page_size))
    gpt.set_pas(0, 1 << 18, PasLabel.NO_ACCESS, ROOT)
    aspace = AddressSpace(owner=0)
    aspace.map(PageTableEntry(0, 0))
    owner, other = m.cores
    for c in m.cores:
        c.gpt_base = gpt.id
    owner.windows = [BypassWindow(0, 1 << 30, 1)]
    cases = ((owner, True, "owning core passes NoAccess through its window"),
             (other, False, "non-owning core still faults on NoAccess"))
    for core, want, what in cases:
        got = m.access(core, aspace, 0, AccessKind.READ, Mode.KERNEL) is None
        rep.checked += 1
        if got != want:
            rep.failures.append(f"window: expected {what}")


# -- isolation matrix --------------------------------------------------------

def isolation_oracle(n_pas: int = 3) -> OracleReport:
    """Switch into every domain and touch every other domain's first page."""
    rep = OracleReport("isolation")
    world = World(WorldConfig(cores=1, n_pas=n_pas))
    domains = world.map_all_domains()
    addrs = [world.domain_vaddr(d) for d in domains]
    core = world.cores[0]
    access = world.machine.access
    aspace = world.aspace
    for src in domains:
        switch_domain(core, src, world.monitor, world.costs)
        for dst, vaddr in zip(domains, addrs):
            rep.checked += 1
            faults = [access(core, aspace, vaddr, k) for k in (AccessKind.READ, AccessKind.WRITE)]
            if dst == src:
                if any(faults):
                    rep.failures.append(f"{src} cannot reach its own page: {faults}")
            else:
                leaked = [f for f in faults if f is None or f.kind not in ("PermFault", "GPF")]
                if leaked:
                    rep.failures.append(f"{src} reached {dst} ({faults})")
    return rep


SUITES = {"perm": perm_oracle, "gpc": gpc_oracle, "isolation": isolation_oracle}


def run_suite(name: str, **kwargs) -> OracleReport:
    return SUITES[name](**kwargs)


def parse_table(rows: Dict[str, List[str]]) -> Dict[SecurityState, frozenset]:
    """``{"normal": ["normal", "full-access"], ...}`` to a matrix; missing rows use defaults."""
    states = {s.value.lower(): s for s in SecurityState}
    labels = {l.value.lower(): l for l in PasLabel}
    out = dict(DEFAULT_ACCESS)
    for k, vals in rows.items():
        if k.lower() not in states:
            raise KeyError(f"unknown security state {k!r}")
        row = set()
        for v in vals:
            key = v.lower().replace("_", "-")
            if key not in labels:
                raise KeyError(f"unknown PAS label {v!r}")
            row.add(labels[key])
        out[states[k.lower()]] = frozenset(row)
    return out
