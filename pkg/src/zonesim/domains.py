"""Three-tier domain identity, switch classification, allocation and costs.

A domain is ``(pas, pie, poe)``: the PAS picks an L3-Zone (one bypass
window), the PIE slot picks an L2-Zone inside it and the POE slot an L1-Zone.
Switching within an L2-Zone only rewrites the user overlay register; crossing
an L2 or L3 boundary needs the Monitor.
"""
from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Dict, List, Optional, Sequence

from .core import CoreState, Mode, read_rng
from .perm import DEFAULT_REGISTRY, FULL, NONE, POE_SLOTS, PieRegistry

POE_DOMAINS = tuple(range(1, POE_SLOTS))     # slot 0 is the fixed full-access slot
DOMAINS_PER_PAS = 28


class Level(enum.IntEnum):
    L1 = 1
    L2 = 2
    L3 = 3


class Exhausted(Exception):
    """No unused domain left in the configured universe."""


class EmptyTrace(ValueError):
    pass


class SwitchRejected(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True, order=True)
class DomainId:
    pas: int
    pie: int
    poe: int

    def __post_init__(self):
        if self.pas < 0:
            raise ValueError("pas index must be non-negative")
        if not 1 <= self.poe < POE_SLOTS:
            raise ValueError(f"poe index {self.poe} outside 1..7")
        if not 0 <= self.pie < 16:
            raise ValueError(f"pie index {self.pie} outside 0..15")

    def validate(self, registry: PieRegistry = DEFAULT_REGISTRY) -> "DomainId":
        if self.pie not in registry.reusable:
            raise ValueError(f"PIE slot {self.pie} is not reusable for domains")
        return self

    def __str__(self):
        return f"<pas{self.pas},pi{self.pie},po{self.poe}>"


def classify_switch(src: Optional[DomainId], dst: DomainId) -> Level:
    if src is None or src.pas != dst.pas:
        return Level.L3
    if src.pie != dst.pie:
        return Level.L2
    return Level.L1


@dataclass
class CostModel:
    """Cycle costs per operation, defaults measured on the reference board."""
    l1_switch: float = 74.13
    l2_switch: float = 6169.47
    l3_switch: float = 6173.36
    ptr_backup: float = 18.02
    ptr_check: float = 11.07
    syscall: float = 725.36
    hooked_syscall: float = 6533.63

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    def switch_cost(self, level: Level) -> float:
        return (self.l1_switch, self.l2_switch, self.l3_switch)[level - 1]

    @property
    def trap_overhead(self) -> float:
        return self.hooked_syscall - self.syscall

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class SwitchEntry:
    core_id: int
    src: Optional[DomainId]
    dst: DomainId
    cycles: float

    @property
    def level(self) -> Level:
        return classify_switch(self.src, self.dst)


@dataclass
class SwitchTrace:
    entries: List[SwitchEntry] = field(default_factory=list)

    def append(self, entry: SwitchEntry) -> None:
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def levels(self) -> List[Level]:
        return [e.level for e in self.entries]


@dataclass(frozen=True)
class Metrics:
    n: int
    counts: Dict[Level, int]
    l1_rate: float
    l2_rate: float
    l3_rate: float
    avg_cycles: float


def metrics(trace: Sequence[SwitchEntry] | SwitchTrace) -> Metrics:
    """Hit rates per level and the rate-weighted mean switch cost.

    Arithmetic is exact (rationals over the stored float cycle values), so the
    weighted form and the plain per-entry mean agree to the last bit.
    """
    entries = list(trace)
    if not entries:
        raise EmptyTrace("metrics of an empty switch trace")
    n = len(entries)
    by_level: Counter = Counter()
    cycles_by_level: Dict[Level, Counter] = {lv: Counter() for lv in Level}
    for e in entries:
        lv = e.level
        by_level[lv] += 1
        cycles_by_level[lv][e.cycles] += 1
    avg = Fraction(0)
    for lv in Level:
        if not by_level[lv]:
            continue
        rate = Fraction(by_level[lv], n)
        mean = sum((Fraction(c) * k for c, k in cycles_by_level[lv].items()), Fraction(0)) / by_level[lv]
        avg += rate * mean
    counts = {lv: by_level[lv] for lv in Level}
    return Metrics(n, counts, counts[Level.L1] / n, counts[Level.L2] / n,
                   counts[Level.L3] / n, float(avg))


# --- switching ------------------------------------------------------------

_OVERLAY = {poe: tuple([FULL] + [FULL if s == poe else NONE for s in POE_DOMAINS])
            for poe in POE_DOMAINS}


def enter_overlay(core: CoreState, poe: int) -> None:
    """Trampoline L1 step: only the target overlay slot stays open."""
    core.por.write_all(_OVERLAY[poe])


def revoke(core: CoreState, costs: Optional[CostModel] = None) -> float:
    """Leave the current domain by clearing every overlay slot.

    ``core.domain`` keeps naming the last configured domain: its base
    permission and window may stay live, only the overlay is closed.
    """
    core.por.write_all((FULL,) + (NONE,) * len(POE_DOMAINS))
    return (costs or CostModel()).l1_switch


def switch_domain(core: CoreState, target: DomainId, monitor=None,
                  costs: Optional[CostModel] = None, via: str = "trampoline",
                  trace: Optional[SwitchTrace] = None) -> SwitchEntry:
    """Move ``core`` into ``target`` and charge the switch.

    L2/L3 switches raise an RNG trap that the Monitor services; ``raw``
    switches model inlined switching code outside the trampoline and are
    always refused.
    """
    if via != "trampoline":
        raise SwitchRejected("NotTrampoline", f"switch via {via!r}")
    costs = costs or CostModel()
    src = core.domain
    level = classify_switch(src, target)
    if level is not Level.L1:
        if monitor is None:
            raise SwitchRejected("NoMonitor", "privileged switch without a Monitor")
        trap = read_rng(core, Mode.USER)
        monitor.rng_trap_switch(core, target, trap)
    enter_overlay(core, target.poe)
    core.domain = target
    entry = SwitchEntry(core.core_id, src, target, costs.switch_cost(level))
    if trace is not None:
        trace.append(entry)
    return entry


# --- allocation -----------------------------------------------------------

@dataclass
class Universe:
    """Ordered domain universe: PAS-major, then PIE slot, then POE slot."""
    n_pas: int
    pies: tuple = DEFAULT_REGISTRY.reusable

    @property
    def per_pas(self) -> int:
        return len(self.pies) * len(POE_DOMAINS)

    def __len__(self):
        return self.n_pas * self.per_pas

    def domain(self, index: int) -> DomainId:
        if not 0 <= index < len(self):
            raise IndexError(index)
        pas, rest = divmod(index, self.per_pas)
        pie_i, poe_i = divmod(rest, len(POE_DOMAINS))
        return DomainId(pas, self.pies[pie_i], POE_DOMAINS[poe_i])

    def index(self, d: DomainId) -> int:
        return (d.pas * self.per_pas + self.pies.index(d.pie) * len(POE_DOMAINS)
                + POE_DOMAINS.index(d.poe))


class _Allocator:
    def __init__(self, universe: Universe, reuse_freed: bool = True):
        self.universe = universe
        self.reuse_freed = reuse_freed
        self.by_conn: Dict[object, int] = {}
        self.in_use: set = set()

    def release(self, connection_id) -> None:
        idx = self.by_conn.pop(connection_id, None)
        if idx is not None:
            self.in_use.discard(idx)
            self._freed(idx)

    def _freed(self, idx: int) -> None:
        raise NotImplementedError

    def domain_of(self, connection_id) -> Optional[DomainId]:
        idx = self.by_conn.get(connection_id)
        return None if idx is None else self.universe.domain(idx)


class RoundRobinAllocator(_Allocator):
    """Hand out domains in global order as connections arrive."""

    def __init__(self, universe: Universe, reuse_freed: bool = True):
        super().__init__(universe, reuse_freed)
        self.next_fresh = 0
        self.free: list = []

    def _freed(self, idx):
        if self.reuse_freed:
            self.free.append(idx)

    def assign(self, connection_id, worker_thread=None) -> DomainId:
        if connection_id in self.by_conn:
            return self.universe.domain(self.by_conn[connection_id])
        if self.free:
            idx = min(self.free)
            self.free.remove(idx)
        elif self.next_fresh < len(self.universe):
            idx = self.next_fresh
            self.next_fresh += 1
        else:
            raise Exhausted(f"all {len(self.universe)} domains are in use")
        self.by_conn[connection_id] = idx
        self.in_use.add(idx)
        return self.universe.domain(idx)


class AffinityAllocator(_Allocator):
    """Give each worker whole PAS blocks and fill them before opening another."""

    def __init__(self, universe: Universe, reuse_freed: bool = True):
        super().__init__(universe, reuse_freed)
        self.next_block = 0
        self.blocks: Dict[object, List[int]] = {}
        self.cursor: Dict[object, int] = {}          # next undrained index in current block
        self.free: Dict[object, list] = {}
        self.owner: Dict[int, object] = {}

    def _freed(self, idx):
        if self.reuse_freed:
            self.free[self.owner[idx]].append(idx)

    def _open_block(self, worker) -> int:
        if self.next_block >= self.universe.n_pas:
            raise Exhausted(f"no unowned PAS block left for worker {worker!r}")
        pas = self.next_block
        self.next_block += 1
        self.blocks.setdefault(worker, []).append(pas)
        start = pas * self.universe.per_pas
        self.cursor[worker] = start
        return start

    def assign(self, connection_id, worker_thread=0) -> DomainId:
        if connection_id in self.by_conn:
            return self.universe.domain(self.by_conn[connection_id])
        w = worker_thread
        free = self.free.setdefault(w, [])
        if free:
            idx = min(free)
            free.remove(idx)
        else:
            cur = self.cursor.get(w)
            block_end = None if cur is None else (self.blocks[w][-1] + 1) * self.universe.per_pas
            if cur is None or cur >= block_end:
                cur = self._open_block(w)
            idx = cur
            self.cursor[w] = cur + 1
        self.by_conn[connection_id] = idx
        self.in_use.add(idx)
        self.owner[idx] = w
        return self.universe.domain(idx)


def make_allocator(policy: str, universe: Universe, reuse_freed: bool = True) -> _Allocator:
    if policy == "round_robin":
        return RoundRobinAllocator(universe, reuse_freed)
    if policy == "affinity":
        return AffinityAllocator(universe, reuse_freed)
    raise ValueError(f"unknown allocation policy {policy!r}")


def alloc_round_robin(state: RoundRobinAllocator, connection_id, worker_thread=None) -> DomainId:
    return state.assign(connection_id, worker_thread)


def alloc_affinity(state: AffinityAllocator, connection_id, worker_thread=0) -> DomainId:
    return state.assign(connection_id, worker_thread)
