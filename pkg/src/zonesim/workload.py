"""Server-shaped workloads and the end-to-end switching simulation.

Connections are handed to workers round-robin in arrival order.  Each
worker keeps at most ``domains_per_core`` connections open in a ring of
slots and serves them in bursts: a run of consecutive requests from one
connection, then on to the next occupied slot.  When a connection has sent
all its requests it closes, its domain is released, and the worker's next
queued connection opens in the freed slot.

Two interleave policies decide run lengths and which worker steps next:

* ``round_robin_arrival``: every run is exactly ``burst`` requests and the
  workers take turns in index order.
* ``random``: run lengths are uniform on ``[1, 2*burst - 1]`` and worker
  order is shuffled every tick, both from ``random.Random(seed)``.
"""
from __future__ import annotations

import dataclasses
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, NamedTuple, Optional

from .domains import (DOMAINS_PER_PAS, CostModel, Level, SwitchTrace, Universe,
                      make_allocator, metrics, switch_domain)
from .world import World, WorldConfig

SCHEMA_VERSION = 1
INTERLEAVES = ("round_robin_arrival", "random")
POLICIES = ("round_robin", "affinity")
SEQUENCE_LEN = 1000


@dataclass
class WorkloadConfig:
    workers: int = 2
    connections: int = 1000
    requests_per_connection: int = 30
    domains_per_core: int = 7
    interleave: str = "round_robin_arrival"
    seed: Optional[int] = None
    burst: int = 5
    alloc_policy: str = "affinity"
    reuse_freed: bool = True
    n_pas: Optional[int] = None          # override the derived universe size
    cost_model: CostModel = field(default_factory=CostModel)

    def __post_init__(self):
        for name in ("workers", "connections", "requests_per_connection",
                     "domains_per_core", "burst"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.interleave not in INTERLEAVES:
            raise ValueError(f"interleave must be one of {INTERLEAVES}, got {self.interleave!r}")
        if self.interleave == "random" and self.seed is None:
            raise ValueError("random interleave needs a seed")
        if self.alloc_policy not in POLICIES:
            raise ValueError(f"alloc_policy must be one of {POLICIES}, got {self.alloc_policy!r}")
        if self.n_pas is not None and self.n_pas < 1:
            raise ValueError("n_pas must be positive")

    def universe_pas(self) -> int:
        if self.n_pas is not None:
            return self.n_pas
        per_worker = -(-self.domains_per_core // DOMAINS_PER_PAS)
        if self.alloc_policy == "affinity":
            return self.workers * per_worker
        return -(-self.workers * self.domains_per_core // DOMAINS_PER_PAS)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cost_model"] = self.cost_model.as_dict()
        d["n_pas"] = self.universe_pas()
        return d


class Event(NamedTuple):
    kind: str          # "connection_open" | "request" | "connection_close"
    conn: int
    worker: int


def dispatch(connection: int, workers: int) -> int:
    """Worker that receives 1-based ``connection`` under round-robin hand-off."""
    return (connection - 1) % workers


def generate(config: WorkloadConfig) -> Iterator[Event]:
    W, D = config.workers, config.domains_per_core
    rng = random.Random(config.seed) if config.interleave == "random" else None
    burst = config.burst
    queues = [deque() for _ in range(W)]
    for c in range(1, config.connections + 1):
        queues[dispatch(c, W)].append(c)

    ring: List[List[Optional[int]]] = [[None] * D for _ in range(W)]
    occupied = [0] * W
    remaining: Dict[int, int] = {}
    cursor = [-1] * W
    run_left = [0] * W

    def open_next(w: int, slot: int):
        c = queues[w].popleft()
        ring[w][slot] = c
        occupied[w] += 1
        remaining[c] = config.requests_per_connection
        return Event("connection_open", c, w)

    # initial admission in arrival order
    for c in range(1, config.connections + 1):
        w = dispatch(c, W)
        if occupied[w] < D:
            yield open_next(w, occupied[w])

    workers = list(range(W))
    while any(occupied):
        if rng is not None:
            rng.shuffle(workers)
        for w in workers:
            if not occupied[w]:
                continue
            slots = ring[w]
            if run_left[w] == 0 or slots[cursor[w]] is None:
                i = cursor[w]
                for _ in range(D):
                    i = (i + 1) % D
                    if slots[i] is not None:
                        break
                cursor[w] = i
                run_left[w] = burst if rng is None else rng.randint(1, 2 * burst - 1)
            slot = cursor[w]
            c = slots[slot]
            yield Event("request", c, w)
            remaining[c] -= 1
            run_left[w] -= 1
            if remaining[c] == 0:
                del remaining[c]
                slots[slot] = None
                occupied[w] -= 1
                run_left[w] = 0
                yield Event("connection_close", c, w)
                if queues[w]:
                    yield open_next(w, slot)


@dataclass
class RunReport:
    config: dict
    counts: Dict[str, int]
    rates: Dict[str, float]
    avg_switch_cycles: float
    per_core: Dict[str, dict]
    total_cycles: float
    monitor: dict
    sequence: List[int]
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def table(self) -> str:
        return format_table([self])


def _summarize(entries) -> dict:
    m = metrics(entries)
    return {
        "counts": {lv.name: m.counts[lv] for lv in Level},
        "rates": {"L1": m.l1_rate, "L2": m.l2_rate, "L3": m.l3_rate},
        "avg_switch_cycles": m.avg_cycles,
        "total_cycles": float(sum(e.cycles for e in entries)),
    }


def simulate(config: WorkloadConfig) -> RunReport:
    """Replay ``generate(config)`` against a fresh World and summarize the switches.

    Each worker core starts already inside its first connection's domain
    (the Monitor sets that up when the thread is scheduled), so the trace
    holds only switches triggered by requests.
    """
    costs = config.cost_model
    n_pas = config.universe_pas()
    world = World(WorldConfig(cores=config.workers, n_pas=n_pas), costs)
    alloc = make_allocator(config.alloc_policy, Universe(n_pas, world.monitor.registry.reusable),
                           config.reuse_freed)
    trace = SwitchTrace()
    cores = world.cores
    monitor = world.monitor
    for ev in generate(config):
        core = cores[ev.worker]
        if ev.kind == "request":
            switch_domain(core, alloc.domain_of(ev.conn), monitor, costs, trace=trace)
        elif ev.kind == "connection_open":
            d = alloc.assign(ev.conn, ev.worker)
            if core.domain is None:
                monitor.preload_domain(core, d)
        else:
            alloc.release(ev.conn)

    overall = _summarize(trace.entries)
    per_core = {}
    for core in cores:
        mine = [e for e in trace.entries if e.core_id == core.core_id]
        if mine:
            per_core[str(core.core_id)] = _summarize(mine)
    return RunReport(
        config=config.as_dict(),
        counts=overall["counts"],
        rates=overall["rates"],
        avg_switch_cycles=overall["avg_switch_cycles"],
        per_core=per_core,
        total_cycles=overall["total_cycles"],
        monitor=monitor.summary(),
        sequence=[int(e.level) for e in trace.entries[:SEQUENCE_LEN]],
    )


def format_table(reports: List[RunReport]) -> str:
    """Aligned text table: domain count, average switch cost, per-level hit rates."""
    head = ("Domains", "Avg. switch (cycles)", "L1", "L2", "L3")
    rows = [head]
    for r in reports:
        rows.append((str(r.config["domains_per_core"]), f"{r.avg_switch_cycles:.2f}",
                     *(f"{100 * r.rates[k]:.2f}%" for k in ("L1", "L2", "L3"))))
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    lines = []
    for n, row in enumerate(rows):
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def baseline_per_pas_gpt(zones: int, l0_bytes: int = 4096) -> dict:
    """Memory cost of the per-zone GPT comparison scheme.

    That scheme clones the top-level GPT table once per L3-Zone; the
    bypass-window design shares one proc GPT and clones nothing.
    """
    if zones < 0 or l0_bytes < 0:
        raise ValueError("zones and l0_bytes must be non-negative")
    return {"extra_gpt_bytes": zones * l0_bytes, "clone_count": zones, "window_clones": 0}
