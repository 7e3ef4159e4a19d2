"""Root-world Monitor: dual GPTs, delegation, trap interception and
privileged switch service.

The OS GPT hides every delegated granule from the kernel.  Each protected
process gets its own proc GPT in which only the L3-Zone PASs are blocked;
a core reaches one of them through a bypass window the Monitor installs.
"""
from __future__ import annotations

import hashlib
import logging
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .core import AddressSpace, CoreState, Machine, Mode, TrapToMonitor
from .domains import DOMAINS_PER_PAS, CostModel, DomainId, SwitchRejected
from .gpt import BypassWindow, Gpt, PasLabel, SecurityState
from .perm import (DEFAULT_PIE_PROFILE, DEFAULT_REGISTRY, FULL, GCS_PIE_INDEX, NONE,
                   PageTableEntry, PieRegistry, decode_perm)

log = logging.getLogger(__name__)
ROOT = SecurityState.ROOT


class MonitorError(Exception):
    pass


class OverlapRejected(MonitorError):
    def __init__(self, requested, conflict):
        super().__init__(f"range {requested} overlaps {conflict}")
        self.requested = requested
        self.conflict = conflict


class OutOfZone(MonitorError):
    pass


class CapacityExceeded(MonitorError):
    pass


class Rejected(MonitorError):
    """A page-table update failed validation; ``rule`` is ``a``, ``b`` or ``c``."""

    def __init__(self, rule: str, detail: str = ""):
        super().__init__(f"rule {rule}: {detail}")
        self.rule = rule


class ContextMismatch(MonitorError):
    pass


class AttestationFailed(MonitorError):
    pass


@dataclass(frozen=True)
class SavedContext:
    core_id: int
    pid: Optional[int]
    pire: tuple
    por: tuple
    gcspr: int
    tpidrro: int
    features: tuple
    windows: tuple
    domain: Optional[DomainId] = None


@dataclass(frozen=True)
class MonitorEvent:
    op: str
    core: Optional[int]
    outcome: str


@dataclass
class Zone:
    """A contiguous L3-Zone: one PAS, reachable through one bypass window."""
    pas: int
    phys_page: int          # first physical page (== granule)
    n_pages: int
    vbase: int              # first virtual page of the remapped zone
    window: BypassWindow

    @property
    def capacity(self) -> int:
        return self.n_pages // DOMAINS_PER_PAS

    def contains_vpages(self, vpage: int, npages: int) -> bool:
        return self.vbase <= vpage and vpage + npages <= self.vbase + self.n_pages


@dataclass
class Process:
    pid: int
    aspace: AddressSpace
    gpt: Gpt
    zones: Dict[int, Zone] = field(default_factory=dict)
    mapped: Counter = field(default_factory=Counter)     # domain -> pages
    secure_vpages: set = field(default_factory=set)


@dataclass(frozen=True)
class Delegation:
    start: int
    end: int
    owner: object
    tag: str = "data"

    def overlaps(self, start: int, end: int) -> bool:
        return start < self.end and self.start < end


def _overlap(a: Tuple[int, int], b: Tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


class Monitor:
    def __init__(self, machine: Machine, costs: Optional[CostModel] = None,
                 registry: PieRegistry = DEFAULT_REGISTRY):
        self.machine = machine
        self.costs = costs or CostModel()
        self.registry = registry
        self.os_gpt = machine.register_gpt(Gpt("os", machine.page_size))
        self.processes: Dict[int, Process] = {}
        self.delegated: List[Delegation] = []
        self.shared_buffers: List[Tuple[int, int]] = []
        self.world_ranges: List[Delegation] = []
        self.saved: Dict[int, SavedContext] = {}
        self.gpt_lock = threading.Lock()
        self.events: List[MonitorEvent] = []
        self.tlb_flushes = 0
        self.cycles = 0.0
        self.device_gpc_enforced = True
        self._exec_slots = self._executable_slots()

    # -- bookkeeping -----------------------------------------------------

    def _log(self, op: str, core: Optional[int], outcome: str = "ok") -> None:
        self.events.append(MonitorEvent(op, core, outcome))

    def _flush_tlb(self, core: Optional[int]) -> None:
        self.tlb_flushes += 1
        self._log("tlb_flush", core)

    def _executable_slots(self) -> frozenset:
        # kernel-requested mappings are judged against the enabled-domain
        # base (0b0111) for reusable slots and the fixed profile otherwise
        out = set(self.registry.reusable)
        for slot, enc in DEFAULT_PIE_PROFILE.items():
            if decode_perm(enc).execute:
                out.add(slot)
        return frozenset(out)

    def summary(self) -> dict:
        ops = Counter(f"{e.op}:{e.outcome}" for e in self.events)
        return {"events": len(self.events), "tlb_flushes": self.tlb_flushes,
                "by_op": dict(sorted(ops.items()))}

    # -- processes and delegation -----------------------------------------

    def create_process(self, pid: int, pt_granules: Tuple[int, int]) -> Process:
        """Register a protected process whose page table lives in ``pt_granules``."""
        gpt = self.machine.register_gpt(Gpt(f"proc{pid}", self.machine.page_size))
        aspace = AddressSpace(owner=pid, pt_granules=tuple(pt_granules))
        proc = Process(pid, aspace, gpt)
        self.processes[pid] = proc
        self.delegate_region(pid, *pt_granules, tag="page-table")
        self._log("create_process", None)
        return proc

    def _check_free(self, start: int, end: int) -> None:
        for d in self.delegated:
            if d.overlaps(start, end):
                raise OverlapRejected((start, end), (d.start, d.end))
        for s in self.shared_buffers:
            if _overlap((start, end), s):
                raise OverlapRejected((start, end), s)
        for d in self.world_ranges:
            if d.overlaps(start, end):
                raise OverlapRejected((start, end), (d.start, d.end))

    def delegate_region(self, pid: int, start: int, end: int, tag: str = "data",
                        l3_zone: bool = False) -> Delegation:
        """Hand granules ``[start, end)`` to ``pid`` and hide them from the OS."""
        if end <= start:
            raise MonitorError(f"empty delegation [{start}, {end})")
        with self.gpt_lock:
            try:
                self._check_free(start, end)
            except OverlapRejected:
                self._log("delegate_region", None, "OverlapRejected")
                raise
            d = Delegation(start, end, pid, tag)
            self.delegated.append(d)
            self.os_gpt.set_pas(start, end, PasLabel.NO_ACCESS, ROOT)
            if l3_zone:
                self.processes[pid].gpt.set_pas(start, end, PasLabel.NO_ACCESS, ROOT)
        self._log("delegate_region", None)
        return d

    def add_zone(self, pid: int, pas: int, phys_page: int, n_pages: int, vbase: int,
                 window_scale: int = 1) -> Zone:
        """Delegate a contiguous L3-Zone and remap it at ``vbase``."""
        ps = self.machine.page_size
        window = BypassWindow(phys_page * ps, n_pages * ps, window_scale)
        proc = self.processes[pid]
        if pas in proc.zones:
            raise MonitorError(f"process {pid} already has PAS {pas}")
        self.delegate_region(pid, phys_page, phys_page + n_pages, tag=f"l3-zone{pas}", l3_zone=True)
        zone = Zone(pas, phys_page, n_pages, vbase, window)
        proc.zones[pas] = zone
        return zone

    def add_shared_buffer(self, start: int, end: int) -> None:
        with self.gpt_lock:
            self._check_free(start, end)
            self.shared_buffers.append((start, end))
            self.os_gpt.set_pas(start, end, PasLabel.FULL_ACCESS, ROOT)
            for p in self.processes.values():
                p.gpt.set_pas(start, end, PasLabel.FULL_ACCESS, ROOT)
        self._log("add_shared_buffer", None)

    def world_request(self, start: int, end: int, world: SecurityState) -> None:
        """Realm or secure world claims granules; keep domains away from them."""
        label = {SecurityState.REALM: PasLabel.REALM,
                 SecurityState.SECURE: PasLabel.SECURE}[world]
        with self.gpt_lock:
            try:
                self._check_free(start, end)
            except OverlapRejected:
                self._log("world_request", None, "OverlapRejected")
                raise
            self.world_ranges.append(Delegation(start, end, world, label.value))
            self.os_gpt.set_pas(start, end, label, ROOT)
            for p in self.processes.values():
                p.gpt.set_pas(start, end, PasLabel.NO_ACCESS, ROOT)
        self._log("world_request", None)

    def attest_image(self, image: bytes, expected_sha256: str) -> None:
        if hashlib.sha256(image).hexdigest() != expected_sha256.lower():
            self._log("attest_image", None, "AttestationFailed")
            raise AttestationFailed("in-memory image digest mismatch")
        self._log("attest_image", None)

    # -- mappings ----------------------------------------------------------

    def map_private(self, pid: int, vpage: int, phys_page: int, npages: int = 1,
                    pie: int = 4, delegate: bool = True) -> None:
        """Map ordinary process pages (code, heap, PIM, GCS) at setup time."""
        proc = self.processes[pid]
        if delegate:
            self.delegate_region(pid, phys_page, phys_page + npages,
                                 tag="gcs" if pie == GCS_PIE_INDEX else "private")
        for i in range(npages):
            proc.aspace.map(PageTableEntry(vpage + i, phys_page + i, pie_idx=pie))
            if pie == GCS_PIE_INDEX:
                proc.secure_vpages.add(vpage + i)

    def zone_mmap(self, pid: int, vpage: int, npages: int, domain: DomainId,
                  exec: bool = False) -> List[PageTableEntry]:
        proc = self.processes[pid]
        domain.validate(self.registry)
        if exec:
            raise Rejected("a", "domain pages are never executable")
        zone = proc.zones.get(domain.pas)
        if zone is None or not zone.contains_vpages(vpage, npages):
            raise OutOfZone(f"pages {vpage:#x}+{npages} outside L3-Zone {domain.pas}")
        for v in range(vpage, vpage + npages):
            if proc.aspace.lookup(v) is not None:
                raise OverlapRejected((vpage, vpage + npages), (v, v + 1))
        if proc.mapped[domain] + npages > zone.capacity:
            raise CapacityExceeded(
                f"{domain} would hold {proc.mapped[domain] + npages} pages, cap {zone.capacity}")
        ptes = []
        for v in range(vpage, vpage + npages):
            pte = PageTableEntry(v, zone.phys_page + (v - zone.vbase),
                                 pie_idx=domain.pie, poe_idx=domain.poe)
            proc.aspace.map(pte)
            proc.secure_vpages.add(v)
            ptes.append(pte)
        proc.mapped[domain] += npages
        self._log("zone_mmap", None)
        return ptes

    def zone_munmap(self, pid: int, vpage: int, npages: int) -> None:
        proc = self.processes[pid]
        for v in range(vpage, vpage + npages):
            pte = proc.aspace.lookup(v)
            if pte is None or v not in proc.secure_vpages:
                raise OutOfZone(f"page {v:#x} is not a zone mapping")
        for v in range(vpage, vpage + npages):
            pte = proc.aspace.unmap(v)
            proc.secure_vpages.discard(v)
            proc.mapped[DomainId(self._pas_of(proc, pte.phys_page), pte.pie_idx, pte.poe_idx)] -= 1
            self.machine.scrub(pte.phys_page)
        self._flush_tlb(None)
        self._log("zone_munmap", None)

    @staticmethod
    def _pas_of(proc: Process, phys_page: int) -> int:
        for z in proc.zones.values():
            if z.phys_page <= phys_page < z.phys_page + z.n_pages:
                return z.pas
        raise OutOfZone(f"physical page {phys_page:#x} is in no zone")

    def _is_secure(self, proc: Process, pte: PageTableEntry) -> bool:
        if pte.virt_page in proc.secure_vpages or pte.is_gcs_page:
            return True
        return any(z.phys_page <= pte.phys_page < z.phys_page + z.n_pages
                   for z in proc.zones.values())

    def validate_pte_update(self, pid: int, old_pte: Optional[PageTableEntry],
                            new_pte: PageTableEntry) -> None:
        """Vet a kernel-requested mapping change; raises :class:`Rejected`."""
        proc = self.processes[pid]
        if old_pte is not None:
            cur = proc.aspace.lookup(old_pte.virt_page)
            if cur is not None and self._is_secure(proc, cur):
                if new_pte.virt_page != cur.virt_page or new_pte.indexes() != cur.indexes() \
                        or not new_pte.valid:
                    raise Rejected("b", f"secure page {cur.virt_page:#x} is immutable")
        if new_pte.is_gcs_page or new_pte.pie_idx in self._exec_slots:
            raise Rejected("a", f"PIE class {new_pte.pie_idx} is executable or reserved")
        if old_pte is None or old_pte.virt_page != new_pte.virt_page:
            if proc.aspace.lookup(new_pte.virt_page) is not None:
                raise Rejected("c", f"virtual page {new_pte.virt_page:#x} already mapped")
        ppage = new_pte.phys_page
        for d in self.delegated:
            if d.start <= ppage < d.end:
                raise Rejected("c", f"physical page {ppage:#x} is delegated ({d.tag})")
        for s, e in self.shared_buffers:
            if s <= ppage < e:
                raise Rejected("c", f"physical page {ppage:#x} is a shared buffer")
        for other in proc.aspace.page_table.values():
            if other.valid and other.phys_page == ppage and \
                    (old_pte is None or other.virt_page != old_pte.virt_page):
                raise Rejected("c", f"physical page {ppage:#x} already mapped")

    def kernel_map_request(self, pid: int, old_pte: Optional[PageTableEntry],
                           new_pte: PageTableEntry) -> None:
        """The kernel forwards a mapping change; the Monitor checks and applies it."""
        try:
            self.validate_pte_update(pid, old_pte, new_pte)
        except Rejected as exc:
            self._log("validate_pte_update", None, f"Rejected({exc.rule})")
            raise
        aspace = self.processes[pid].aspace
        if old_pte is not None:
            aspace.unmap(old_pte.virt_page)
        aspace.map(new_pte)
        self._flush_tlb(None)
        self._log("validate_pte_update", None)

    # -- cores -------------------------------------------------------------

    def schedule(self, core: CoreState, pid: int, tpidrro: int = 0, gcspr: int = 0) -> None:
        """Initial register setup when a protected thread first runs on ``core``."""
        proc = self.processes[pid]
        core.pid = pid
        core.gpt_base = proc.gpt.id
        core.set_tpidrro(tpidrro, Mode.MONITOR)
        core.gcspr = gcspr
        for slot in self.registry.reusable:
            core.pire[slot] = NONE
        core.por.zero()
        core.windows = []
        core.domain = None
        for name in ("poe_on", "pie_on", "gcs_on", "rng_trap_on"):
            core.set_feature(name, True, Mode.MONITOR)
        self._log("schedule", core.core_id)

    def preload_domain(self, core: CoreState, domain: DomainId) -> None:
        """Set base permission and window for ``domain`` without charging a switch."""
        self._install(core, domain)
        core.domain = domain

    @staticmethod
    def snapshot(core: CoreState) -> SavedContext:
        return SavedContext(core.core_id, core.pid, core.pire.snapshot(), core.por.snapshot(),
                            core.gcspr, core.tpidrro, core.features.as_tuple(),
                            tuple(core.windows), core.domain)

    def intercept_trap(self, core: CoreState, cause: str) -> SavedContext:
        if cause not in ("syscall", "irq", "rng_trap"):
            raise ValueError(f"unknown trap cause {cause!r}")
        saved = self.snapshot(core)
        self.saved[core.core_id] = saved
        core.pire.zero()
        core.por.zero()
        core.windows = []
        core.gcspr = 0
        core.set_tpidrro(0, Mode.MONITOR)
        core.gpt_base = self.os_gpt.id
        self._flush_tlb(core.core_id)
        self.cycles += self.costs.trap_overhead
        self._log(f"intercept_{cause}", core.core_id)
        return saved

    def resume_process(self, core: CoreState, saved: SavedContext) -> None:
        stored = self.saved.get(core.core_id)
        if saved.core_id != core.core_id or stored != saved:
            self._log("resume_process", core.core_id, "ContextMismatch")
            raise ContextMismatch(f"context for core {saved.core_id} cannot resume core {core.core_id}")
        del self.saved[core.core_id]
        core.pire.slots = list(saved.pire)
        core.por.slots = list(saved.por)
        core.gcspr = saved.gcspr
        core.set_tpidrro(saved.tpidrro, Mode.MONITOR)
        core.windows = list(saved.windows)
        core.pid = saved.pid
        core.domain = saved.domain
        for name in ("poe_on", "pie_on", "gcs_on", "rng_trap_on"):
            core.set_feature(name, True, Mode.MONITOR)
        if saved.pid is not None:
            core.gpt_base = self.processes[saved.pid].gpt.id
        self._log("resume_process", core.core_id)

    def syscall(self, core: CoreState, kernel=None, name: str = "getpid") -> float:
        """Run one intercepted syscall end to end and return its cycle cost."""
        saved = self.intercept_trap(core, "syscall")
        if kernel is not None:
            kernel(core)
        self.resume_process(core, saved)
        return self.costs.syscall + self.costs.trap_overhead

    def _install(self, core: CoreState, target: DomainId) -> None:
        proc = self.processes[core.pid]
        zone = proc.zones[target.pas]
        for slot in self.registry.reusable:
            core.pire[slot] = FULL if slot == target.pie else NONE
        if not any(w == zone.window for w in core.windows):
            core.windows = [zone.window]
            self._flush_tlb(core.core_id)

    def rng_trap_switch(self, core: CoreState, target: DomainId,
                        trap: Optional[TrapToMonitor] = None) -> None:
        """Service an L2/L3 switch request that arrived through the RNG trap."""
        gpt_base = trap.gpt_base if trap is not None else core.gpt_base
        proc = self.processes.get(core.pid) if core.pid is not None else None
        if proc is None or gpt_base != proc.gpt.id or core.gpt_base != proc.gpt.id:
            self._log("rng_trap_switch", core.core_id, "SwitchRejected(WrongGptBase)")
            raise SwitchRejected("WrongGptBase", f"GPT base {gpt_base!r}")
        if target.pie not in self.registry.reusable:
            self._log("rng_trap_switch", core.core_id, "SwitchRejected(BadPie)")
            raise SwitchRejected("BadPie", f"PIE slot {target.pie}")
        if target.pas not in proc.zones:
            self._log("rng_trap_switch", core.core_id, "SwitchRejected(IllegalWindow)")
            raise SwitchRejected("IllegalWindow", f"PAS {target.pas} is not delegated")
        self._install(core, target)
        self._log("rng_trap_switch", core.core_id)

    # -- invariants ----------------------------------------------------------

    def check_invariants(self) -> List[str]:
        bad = []
        ds = sorted(self.delegated, key=lambda d: d.start)
        for a, b in zip(ds, ds[1:]):
            if a.end > b.start:
                bad.append(f"delegations overlap: {a} / {b}")
        for d in ds:
            for s in self.shared_buffers:
                if _overlap((d.start, d.end), s):
                    bad.append(f"delegation {d} overlaps shared buffer {s}")
            for s, e, lab in self._runs(self.os_gpt, d.start, d.end):
                if lab is not PasLabel.NO_ACCESS:
                    bad.append(f"OS GPT exposes delegated granules [{s}, {e}) as {lab.value}")
        for p in self.processes.values():
            for z in p.zones.values():
                for s, e, lab in self._runs(p.gpt, z.phys_page, z.phys_page + z.n_pages):
                    if lab is not PasLabel.NO_ACCESS:
                        bad.append(f"proc GPT {p.gpt.id} exposes L3-Zone {z.pas} as {lab.value}")
        return bad

    @staticmethod
    def _runs(gpt: Gpt, start: int, end: int):
        """Label runs of ``gpt`` restricted to ``[start, end)``."""
        out = []
        pos = start
        for s, e, lab in gpt.granule_map.runs():
            if e <= start or s >= end:
                continue
            if s > pos:
                out.append((pos, s, gpt.granule_map.default))
            out.append((max(s, start), min(e, end), lab))
            pos = min(e, end)
        if pos < end:
            out.append((pos, end, gpt.granule_map.default))
        return out
