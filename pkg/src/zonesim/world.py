"""A ready-made protected process: machine, Monitor, zones, PIM and GCS stacks.

Physical layout (page numbers)::

    0x100  page-table pages            delegated
    0x200  code                        delegated, PIE 1 (RX)
    0x300  heap                        delegated, PIE 4 (RW)
    0x400  per-thread PIM regions      delegated, PIE 11 (GCS)
    0x600  per-thread GCS stacks       delegated, PIE 11
    0x800  shared syscall buffers      FullAccess
    0x900  kernel memory               not delegated
    0x1000+ L3-Zone per PAS, each aligned to its window size

Each domain owns a fixed slice of its zone: ``capacity`` pages starting at
``zone.vbase + local_index * capacity``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

from .core import AddressSpace, CoreState, Machine, Mode
from .cpi import PIM_ENTRY_BYTES, PimRegion, ThreadCpi
from .domains import CostModel, DomainId, Universe
from .gpt import GiB, SecurityState
from .monitor import Monitor, Process, Zone
from .perm import GCS_PIE_INDEX, PageTableEntry

PT_PHYS = 0x100
CODE_PHYS, CODE_VPAGE = 0x200, 0x400
HEAP_PHYS, HEAP_VPAGE, HEAP_PAGES = 0x300, 0x1000, 64
PIM_PHYS, PIM_VPAGE = 0x400, 0x2000
GCS_PHYS, GCS_VPAGE, GCS_PAGES = 0x600, 0x3000, 4
SHARED_PHYS = 0x800
KERNEL_PHYS = 0x900
ZONE_PHYS_MIN = 0x1000
ZONE_VBASE = 0x100000
KERNEL_VBASE = 0x8000000


@dataclass
class WorldConfig:
    cores: int = 2
    n_pas: int = 3
    window_scale: int = 1
    pim_capacity: int = 4096
    pid: int = 1
    granule_size: int = 4096


class World:
    def __init__(self, config: Optional[WorldConfig] = None, costs: Optional[CostModel] = None,
                 matrix=None, gpt_labels=()):
        cfg = config or WorldConfig()
        self.config = cfg
        self.costs = costs or CostModel()
        self.machine = Machine(cfg.cores, page_size=cfg.granule_size, matrix=matrix)
        self.monitor = Monitor(self.machine, self.costs)
        for start, end, label in gpt_labels:
            self.monitor.os_gpt.set_pas(start, end, label, SecurityState.ROOT)
        ps = self.machine.page_size
        self.zone_pages = (GiB // cfg.window_scale) // ps
        # zones sit above the fixed layout, aligned to their own size
        self._first_zone = max(1, -(-ZONE_PHYS_MIN // self.zone_pages))
        mon = self.monitor
        self.pid = cfg.pid
        self.proc: Process = mon.create_process(cfg.pid, (PT_PHYS, PT_PHYS + 4))
        mon.map_private(cfg.pid, CODE_VPAGE, CODE_PHYS, 16, pie=1)
        mon.map_private(cfg.pid, HEAP_VPAGE, HEAP_PHYS, HEAP_PAGES, pie=4)
        mon.add_shared_buffer(SHARED_PHYS, SHARED_PHYS + 16)
        mon.map_private(cfg.pid, SHARED_PHYS, SHARED_PHYS, 16, pie=4, delegate=False)
        for pas in range(cfg.n_pas):
            self.add_zone(pas)
        self.threads: List[ThreadCpi] = []
        pim_pages = -(-cfg.pim_capacity * PIM_ENTRY_BYTES // ps)
        for core in self.machine.cores:
            t = core.core_id
            pim_v = PIM_VPAGE + t * 0x100
            gcs_v = GCS_VPAGE + t * 0x10
            mon.map_private(cfg.pid, pim_v, PIM_PHYS + t * 0x40, pim_pages, pie=GCS_PIE_INDEX)
            mon.map_private(cfg.pid, gcs_v, GCS_PHYS + t * 0x10, GCS_PAGES, pie=GCS_PIE_INDEX)
            gcs_top = (gcs_v + GCS_PAGES) * ps
            mon.schedule(core, cfg.pid, tpidrro=pim_v * ps, gcspr=gcs_top)
            pim = PimRegion(base=pim_v * ps, capacity=cfg.pim_capacity)
            self.threads.append(ThreadCpi(pim, self.machine, core, self.proc.aspace,
                                          self.costs, gcs_base=gcs_top))
        self.kernel_aspace = AddressSpace(owner=0)
        for i in range(16):
            self.kernel_aspace.map(PageTableEntry(KERNEL_VBASE + KERNEL_PHYS + i, KERNEL_PHYS + i))

    # -- layout helpers ----------------------------------------------------

    @property
    def aspace(self) -> AddressSpace:
        return self.proc.aspace

    @property
    def cores(self) -> List[CoreState]:
        return self.machine.cores

    def add_zone(self, pas: int) -> Zone:
        phys = (pas + self._first_zone) * self.zone_pages
        vbase = ZONE_VBASE + pas * self.zone_pages
        return self.monitor.add_zone(self.pid, pas, phys, self.zone_pages, vbase,
                                     self.config.window_scale)

    def universe(self) -> Universe:
        return Universe(len(self.proc.zones), self.monitor.registry.reusable)

    def domain_vpage(self, d: DomainId, page: int = 0) -> int:
        zone = self.proc.zones[d.pas]
        local = self.universe().index(DomainId(0, d.pie, d.poe))
        if not 0 <= page < zone.capacity:
            raise IndexError(page)
        return zone.vbase + local * zone.capacity + page

    def domain_vaddr(self, d: DomainId, page: int = 0, offset: int = 0) -> int:
        return self.domain_vpage(d, page) * self.machine.page_size + offset

    def map_domain(self, d: DomainId, npages: int = 1) -> int:
        """Map the first ``npages`` pages of ``d``'s slice; returns the first vaddr."""
        vpage = self.domain_vpage(d)
        todo = [v for v in range(vpage, vpage + npages) if self.aspace.lookup(v) is None]
        if todo:
            self.monitor.zone_mmap(self.pid, todo[0], len(todo), d)
        return vpage * self.machine.page_size

    def map_all_domains(self, npages: int = 1) -> List[DomainId]:
        u = self.universe()
        ds = [u.domain(i) for i in range(len(u))]
        for d in ds:
            self.map_domain(d, npages)
        return ds

    def kernel_alias(self, phys_page: int) -> int:
        """Map ``phys_page`` into the kernel address space; returns its kernel vaddr."""
        v = KERNEL_VBASE + phys_page
        if self.kernel_aspace.lookup(v) is None:
            self.kernel_aspace.map(PageTableEntry(v, phys_page))
        return v * self.machine.page_size

    def pim_vaddr(self, core_id: int = 0, slot: int = 0) -> int:
        return self.threads[core_id].pim.slot_addr(slot)

    def symbols(self, core_id: int = 0) -> Dict[str, int]:
        ps = self.machine.page_size
        return {
            "pim": self.threads[core_id].pim.base,
            "gcs": self.threads[core_id].gcs_base - ps,
            "heap": HEAP_VPAGE * ps,
            "code": CODE_VPAGE * ps,
            "shared": SHARED_PHYS * ps,
        }

    def kernel_access(self, core: CoreState, vaddr: int, kind):
        return self.machine.access(core, self.kernel_aspace, vaddr, kind, Mode.KERNEL)
