"""Data-driven attack scenarios.

A scenario file is JSON with ``name``, ``description``, ``expected``,
optional ``world`` overrides, and two step lists: ``setup`` (every step must
come back ``ok``) and ``attack``.  Each attack step may carry an ``expect``
outcome (default ``ok``).  The scenario is *blocked* when every attack step
matches its expectation and the last one equals the scenario's
``expected`` class; an attack step that was supposed to fault but returned
``ok`` marks the scenario *breached*.

Domains are written ``[pas, pie, poe]``.  Step ops:

``map`` domains, pages
    map the first ``pages`` pages of each domain's slice
``switch`` core, domain, via
    trampoline switch (``via`` other than ``trampoline`` is refused)
``access`` core, domain | symbol, page, offset, kind
    user access; ``page: "past_end"`` addresses the page after the slice
``kernel_access`` core, phys | region, kind
    kernel-mode access through the kernel's alias mapping, from inside a trap
``kernel_retag`` domain, page, pie, poe
    kernel asks the Monitor to change a domain page's indexes
``kernel_map`` vpage, phys | region, pie
    kernel asks the Monitor to install a fresh mapping
``syscall`` core, tamper
    trap, let the kernel scribble on the core registers, resume
``forge_rng_trap`` core, domain
    kernel fakes an RNG-trap switch request while the OS GPT is live
``program`` core, file | text, instrument, scan
    run a ToyProgram on the core
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional

from .core import AccessKind, Mode, read_rng
from .domains import DomainId, SwitchRejected, switch_domain
from .interp import execute, outcome_of
from .monitor import MonitorError
from .perm import PageTableEntry
from .program import binary_scan, instrument, parse_program
from .world import (CODE_PHYS, GCS_PHYS, HEAP_PHYS, KERNEL_PHYS, PIM_PHYS, PT_PHYS, SHARED_PHYS,
                    World, WorldConfig)

GOLDEN = (
    "heartbleed_oob_read", "oob_write_libx11", "ret_overwrite_nginx", "fnptr_overwrite_zlog",
    "fnptr_reuse_type_confusion", "kernel_pte_retag", "kernel_reg_tamper_getpid",
    "iago_mmap_overlap", "rng_trap_forgery", "stray_gcsstr_inline", "pim_oob_index",
    "cross_core_window",
)
CONTROL = "benign_baseline"
OUTCOME_CLASSES = ("PermFault", "GPF", "CfiViolation", "CpiViolation", "Rejected", "SwitchRejected")

REGIONS = {"pt": PT_PHYS, "code": CODE_PHYS, "heap": HEAP_PHYS, "pim": PIM_PHYS,
           "gcs": GCS_PHYS, "shared": SHARED_PHYS, "kernel": KERNEL_PHYS}
KINDS = {"read": AccessKind.READ, "write": AccessKind.WRITE, "exec": AccessKind.EXEC,
         "gcs_store": AccessKind.GCS_STORE}
WORLD_KEYS = {"cores", "n_pas", "window_scale", "pim_capacity", "granule_size"}


class UnknownScenario(KeyError):
    pass


class ScenarioError(ValueError):
    """Malformed scenario file."""


@dataclass
class Scenario:
    name: str
    expected: str
    setup: List[dict]
    attack: List[dict]
    description: str = ""
    world: Dict[str, int] = field(default_factory=dict)
    base_dir: Optional[Path] = None

    @classmethod
    def from_dict(cls, data: dict, base_dir: Optional[Path] = None) -> "Scenario":
        allowed = {"name", "description", "expected", "world", "setup", "attack", "cve"}
        extra = set(data) - allowed
        if extra:
            raise ScenarioError(f"unknown scenario key(s): {', '.join(sorted(extra))}")
        for k in ("name", "expected", "attack"):
            if k not in data:
                raise ScenarioError(f"scenario is missing {k!r}")
        bad = set(data.get("world", {})) - WORLD_KEYS
        if bad:
            raise ScenarioError(f"unknown world key(s): {', '.join(sorted(bad))}")
        exp = data["expected"]
        if exp != "ok" and exp.split("(", 1)[0] not in OUTCOME_CLASSES:
            raise ScenarioError(f"expected outcome {exp!r} is not a known class")
        return cls(data["name"], exp, list(data.get("setup", [])), list(data["attack"]),
                   data.get("description", ""), dict(data.get("world", {})), base_dir)


@dataclass
class StepResult:
    phase: str
    op: str
    expect: str
    outcome: str
    detail: str = ""

    @property
    def matched(self) -> bool:
        return self.outcome == self.expect


@dataclass
class ScenarioResult:
    name: str
    expected: str
    status: str            # "blocked" | "breached" | "mismatch" | "completed" | "setup_failed"
    outcome: str
    steps: List[StepResult]

    @property
    def passed(self) -> bool:
        if self.expected == "ok":
            return self.status == "completed"
        return self.status == "blocked"

    @property
    def faults(self) -> int:
        return sum(s.outcome != "ok" for s in self.steps)


def _domain(v) -> DomainId:
    return DomainId(*v)


class Runner:
    def __init__(self, scenario: Scenario):
        cfg = WorldConfig(**scenario.world)
        self.scenario = scenario
        self.world = World(cfg)

    def _core(self, step):
        return self.world.cores[step.get("core", 0)]

    def _phys(self, step) -> int:
        if "region" in step:
            return REGIONS[step["region"]] + step.get("page", 0)
        return step["phys"]

    def run_step(self, step: dict) -> str:
        op = step["op"]
        handler = getattr(self, f"op_{op}", None)
        if handler is None:
            raise ScenarioError(f"unknown step op {op!r}")
        try:
            res = handler(step)
        except (MonitorError, SwitchRejected) as exc:
            return outcome_of(exc)
        return "ok" if res is None else res

    # -- step ops ------------------------------------------------------------

    def op_map(self, step):
        for d in step["domains"]:
            self.world.map_domain(_domain(d), step.get("pages", 1))

    def op_switch(self, step):
        switch_domain(self._core(step), _domain(step["domain"]), self.world.monitor,
                      self.world.costs, via=step.get("via", "trampoline"))

    def op_access(self, step):
        w = self.world
        page = step.get("page", 0)
        if "symbol" in step:
            vaddr = w.symbols(step.get("core", 0))[step["symbol"]] + page * w.machine.page_size
        else:
            d = _domain(step["domain"])
            if page == "past_end":
                zone = w.proc.zones[d.pas]
                vaddr = (w.domain_vpage(d, zone.capacity - 1) + 1) * w.machine.page_size
            else:
                vaddr = w.domain_vaddr(d, page)
        fault = w.machine.access(self._core(step), w.aspace, vaddr + step.get("offset", 0),
                                 KINDS[step.get("kind", "read")], Mode.USER)
        return None if fault is None else fault.kind

    def op_kernel_access(self, step):
        w = self.world
        core = self._core(step)
        saved = w.monitor.intercept_trap(core, "syscall")
        try:
            vaddr = w.kernel_alias(self._phys(step))
            fault = w.kernel_access(core, vaddr, KINDS[step.get("kind", "write")])
        finally:
            w.monitor.resume_process(core, saved)
        return None if fault is None else fault.kind

    def op_kernel_retag(self, step):
        w = self.world
        d = _domain(step["domain"])
        old = w.aspace.lookup(w.domain_vpage(d, step.get("page", 0)))
        new = PageTableEntry(old.virt_page, old.phys_page, pie_idx=step.get("pie", old.pie_idx),
                             poe_idx=step.get("poe", old.poe_idx))
        w.monitor.kernel_map_request(w.pid, old, new)

    def op_kernel_map(self, step):
        w = self.world
        new = PageTableEntry(step["vpage"], self._phys(step), pie_idx=step.get("pie", 4))
        w.monitor.kernel_map_request(w.pid, None, new)

    def op_syscall(self, step):
        w = self.world
        core = self._core(step)
        tamper = step.get("tamper", {})

        def kernel(c):
            for slot, enc in tamper.get("pire", {}).items():
                c.pire[int(slot)] = enc
            for slot, enc in tamper.get("por", {}).items():
                c.por[int(slot)] = enc
            for name, on in tamper.get("features", {}).items():
                c.set_feature(name, on, Mode.KERNEL)
            if tamper.get("windows") == "all":
                c.windows = [z.window for z in w.proc.zones.values()]
            if "tpidrro" in tamper:
                c.set_tpidrro(tamper["tpidrro"], Mode.KERNEL)

        w.monitor.syscall(core, kernel=kernel)

    def op_forge_rng_trap(self, step):
        w = self.world
        core = self._core(step)
        saved = w.monitor.intercept_trap(core, "syscall")
        try:
            w.monitor.rng_trap_switch(core, _domain(step["domain"]), read_rng(core, Mode.KERNEL))
        finally:
            w.monitor.resume_process(core, saved)

    def op_program(self, step):
        if "text" in step:
            text = step["text"]
            if isinstance(text, list):
                text = "\n".join(text)
        else:
            base = self.scenario.base_dir or Path(".")
            text = (base / step["file"]).read_text()
        prog = parse_program(text)
        if step.get("instrument", True):
            prog = instrument(prog)
        if step.get("scan", False):
            prog, _ = binary_scan(prog)
        res = execute(self.world, prog, step.get("core", 0))
        return res.outcome

    # -- driver ----------------------------------------------------------------

    def run(self) -> ScenarioResult:
        sc = self.scenario
        steps: List[StepResult] = []
        for st in sc.setup:
            out = self.run_step(st)
            steps.append(StepResult("setup", st["op"], "ok", out))
            if out != "ok":
                return ScenarioResult(sc.name, sc.expected, "setup_failed", out, steps)
        out = "ok"
        for st in sc.attack:
            expect = st.get("expect", "ok")
            out = self.run_step(st)
            steps.append(StepResult("attack", st["op"], expect, out))
            if out != expect:
                status = "breached" if out == "ok" else "mismatch"
                return ScenarioResult(sc.name, sc.expected, status, out, steps)
        if sc.expected == "ok":
            return ScenarioResult(sc.name, sc.expected, "completed", out, steps)
        status = "blocked" if out == sc.expected else "mismatch"
        return ScenarioResult(sc.name, sc.expected, status, out, steps)


def _builtin_dir():
    return resources.files("zonesim") / "scenarios"


def manifest() -> dict:
    return json.loads((_builtin_dir() / "manifest.json").read_text())


def load_scenario(name_or_path: str) -> Scenario:
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        return Scenario.from_dict(json.loads(p.read_text()), p.parent)
    src = _builtin_dir() / f"{name_or_path}.json"
    if not src.is_file():
        raise UnknownScenario(name_or_path)
    with resources.as_file(_builtin_dir()) as d:
        return Scenario.from_dict(json.loads(src.read_text()), Path(d))


def run_scenario(name_or_path) -> ScenarioResult:
    sc = name_or_path if isinstance(name_or_path, Scenario) else load_scenario(name_or_path)
    return Runner(sc).run()


def run_suite(names=GOLDEN) -> List[ScenarioResult]:
    return [run_scenario(n) for n in names]
