"""Per-core machine state and the memory-access pipeline.

An access walks the address space, resolves PIE/POE permissions (user mode
only), translates to a physical address and finally runs the granule
protection check with the core's bypass windows.  The first failing stage is
reported; permission faults therefore win over GPFs.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .gpt import DEFAULT_ACCESS, BypassWindow, Gpt, SecurityState, gpc_check
from .perm import (GCS_CLASS, PageTableEntry, PireRegister, PorRegister, GcsClass,
                   PermSet, decode_perm, resolve_pte)

PAGE_SIZE = 4096


class AccessKind(enum.Enum):
    READ = "read"
    WRITE = "write"
    EXEC = "exec"
    GCS_STORE = "gcsstore"


class Mode(enum.Enum):
    USER = "user"
    KERNEL = "kernel"
    MONITOR = "monitor"


class PrivilegeError(Exception):
    """A user-mode operation touched state it has no right to write."""


class RngTrapDisabled(Exception):
    pass


@dataclass(frozen=True)
class Fault:
    vaddr: int
    stage: str

    @property
    def kind(self) -> str:
        return type(self).__name__


@dataclass(frozen=True)
class TranslationFault(Fault):
    stage: str = "walk"


@dataclass(frozen=True)
class PermFault(Fault):
    stage: str = "perm"
    access: str = ""
    perms: str = ""


@dataclass(frozen=True)
class GPF(Fault):
    stage: str = "gpc"
    paddr: int = 0
    granule: int = 0
    label: str = ""


AccessResult = Optional[Fault]


@dataclass
class Features:
    poe_on: bool = True
    pie_on: bool = True
    gcs_on: bool = True
    rng_trap_on: bool = True

    def all_on(self) -> bool:
        return self.poe_on and self.pie_on and self.gcs_on and self.rng_trap_on

    def as_tuple(self) -> tuple:
        return (self.poe_on, self.pie_on, self.gcs_on, self.rng_trap_on)


@dataclass(frozen=True)
class TrapToMonitor:
    core_id: int
    gpt_base: str
    mode: Mode
    register: str = "RNDR"


@dataclass
class CoreState:
    core_id: int
    security_state: SecurityState = SecurityState.NORMAL
    pire: PireRegister = field(default_factory=PireRegister)
    por: PorRegister = field(default_factory=PorRegister)
    windows: List[BypassWindow] = field(default_factory=list)
    gpt_base: str = ""
    gcspr: int = 0
    features: Features = field(default_factory=Features)
    pid: Optional[int] = None
    domain: Optional[object] = None
    _tpidrro: int = 0

    @property
    def tpidrro(self) -> int:
        return self._tpidrro

    def set_tpidrro(self, value: int, mode: Mode) -> None:
        if mode is Mode.USER:
            raise PrivilegeError("TPIDRRO_EL0 is read-only at EL0")
        self._tpidrro = value

    def set_feature(self, name: str, value: bool, mode: Mode) -> None:
        if mode is Mode.USER:
            raise PrivilegeError("feature controls are not writable at EL0")
        if not hasattr(self.features, name):
            raise KeyError(name)
        setattr(self.features, name, value)


@dataclass
class AddressSpace:
    owner: int
    page_table: Dict[int, PageTableEntry] = field(default_factory=dict)
    # physical granules holding the page table itself
    pt_granules: tuple = ()

    def lookup(self, vpage: int) -> Optional[PageTableEntry]:
        pte = self.page_table.get(vpage)
        if pte is not None and pte.valid:
            return pte
        return None

    def map(self, pte: PageTableEntry) -> None:
        cur = self.page_table.get(pte.virt_page)
        if cur is not None and cur.valid and cur is not pte:
            raise ValueError(f"virtual page {pte.virt_page:#x} already mapped")
        self.page_table[pte.virt_page] = pte

    def unmap(self, vpage: int) -> Optional[PageTableEntry]:
        return self.page_table.pop(vpage, None)


_NEEDS = {
    AccessKind.READ: "read",
    AccessKind.WRITE: "write",
    AccessKind.EXEC: "execute",
}


_ALL = PermSet(True, True, True)


def user_perms(pte: PageTableEntry, core: CoreState):
    """EL0 view of a page. A disabled extension stops enforcing its layer."""
    feats = core.features
    if pte.is_gcs_page:
        return GCS_CLASS
    if feats.pie_on and feats.poe_on:
        return resolve_pte(pte, core.pire, core.por)
    base = decode_perm(core.pire[pte.pie_idx]) if feats.pie_on else _ALL
    overlay = decode_perm(core.por[pte.poe_idx]) if feats.poe_on else _ALL
    return base & overlay


def user_permits(perms, kind: AccessKind, gcs_on: bool = True) -> bool:
    if isinstance(perms, GcsClass):
        if kind is AccessKind.READ:
            return True
        return kind is AccessKind.GCS_STORE and gcs_on
    if kind is AccessKind.GCS_STORE:
        return False
    return getattr(perms, _NEEDS[kind])


class Machine:
    """Cores, registered GPTs, address spaces and a small physical memory."""

    def __init__(self, n_cores: int = 2, page_size: int = PAGE_SIZE, matrix=None):
        self.page_size = page_size
        self.cores = [CoreState(core_id=i) for i in range(n_cores)]
        self.gpts: Dict[str, Gpt] = {}
        self.matrix = dict(matrix) if matrix is not None else DEFAULT_ACCESS
        self.memory: Dict[int, int] = {}   # physical word address -> value
        self.events: list = []

    def register_gpt(self, gpt: Gpt) -> Gpt:
        self.gpts[gpt.id] = gpt
        return gpt

    def access(self, core: CoreState, aspace: AddressSpace, vaddr: int,
               kind: AccessKind, mode: Mode = Mode.USER) -> AccessResult:
        vpage, off = divmod(vaddr, self.page_size)
        pte = aspace.lookup(vpage)
        if pte is None:
            return TranslationFault(vaddr)
        if mode is Mode.USER:
            perms = user_perms(pte, core)
            if not user_permits(perms, kind, core.features.gcs_on):
                return PermFault(vaddr, access=kind.value, perms=str(perms))
        paddr = pte.phys_page * self.page_size + off
        state = SecurityState.ROOT if mode is Mode.MONITOR else core.security_state
        gpt = self.gpts[core.gpt_base]
        gpf = gpc_check(gpt, state, paddr, core.windows, self.matrix)
        if gpf is not None:
            return GPF(vaddr, paddr=paddr, granule=gpf.granule, label=gpf.label.value)
        return None

    def load(self, core, aspace, vaddr, mode=Mode.USER):
        """Read a word; returns ``(value, fault)``."""
        fault = self.access(core, aspace, vaddr, AccessKind.READ, mode)
        if fault is not None:
            return None, fault
        return self.memory.get(self._paddr(aspace, vaddr), 0), None

    def store(self, core, aspace, vaddr, value, kind=AccessKind.WRITE, mode=Mode.USER):
        fault = self.access(core, aspace, vaddr, kind, mode)
        if fault is None:
            self.memory[self._paddr(aspace, vaddr)] = value
        return fault

    def _paddr(self, aspace: AddressSpace, vaddr: int) -> int:
        vpage, off = divmod(vaddr, self.page_size)
        return aspace.page_table[vpage].phys_page * self.page_size + off

    def scrub(self, phys_page: int) -> None:
        lo = phys_page * self.page_size
        hi = lo + self.page_size
        for a in [a for a in self.memory if lo <= a < hi]:
            del self.memory[a]


def user_write_por(core: CoreState, slot: int, encoding: int) -> None:
    """EL0 write of one overlay slot. Writes to slot 0 are dropped."""
    core.por[slot] = encoding


def read_rng(core: CoreState, mode: Mode = Mode.USER, register: str = "RNDR") -> TrapToMonitor:
    if not core.features.rng_trap_on:
        raise RngTrapDisabled(f"core {core.core_id}: RNG trap is disabled")
    return TrapToMonitor(core.core_id, core.gpt_base, mode, register)
