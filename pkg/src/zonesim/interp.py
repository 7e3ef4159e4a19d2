"""Run a ToyProgram on one core of a :class:`~zonesim.world.World`.

Named operands such as ``h.cb`` live in a register-like variable file, not
in simulated memory.  Memory operands are ``SYMBOL+OFFSET`` (symbols come
from :meth:`World.symbols`) or plain integers.

Plain instructions understood by the interpreter::

    str ADDR VAL      ordinary user store
    ldr ADDR          ordinary user load
    set VAR VAL       overwrite a variable
    clobber VAR VAL   overwrite only the low 48 address bits (partial overflow)
    copy DST SRC      copy one variable into another
    smash_ret VAL     overwrite the saved return address on the call stack
    nop ...           no effect

Anything else is treated as ``nop``.  Execution stops at the first fault or
integrity violation, which becomes the result's ``outcome``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .core import AccessKind, Mode, user_write_por
from .cpi import (ADDR_MASK, CfiViolation, CpiViolation, GcsStoreFault, untag, untagged)
from .program import (BitcastStore, DirectCall, IndirectCall, MemCopyInit, PimBackup, PimCheck,
                      Plain, RawGcsStore, RawPorWrite, Ret, StoreFnPtr, ToyProgram)

log = logging.getLogger(__name__)

INSN_BYTES = 4


@dataclass
class ExecResult:
    outcome: str = "ok"
    pc: Optional[int] = None           # index of the faulting line
    calls: List[int] = field(default_factory=list)   # indirect-call targets reached
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.outcome == "ok"


class _Stop(Exception):
    def __init__(self, outcome: str, detail: str = ""):
        super().__init__(outcome)
        self.outcome = outcome
        self.detail = detail


def outcome_of(exc: BaseException) -> str:
    """Map a simulator exception onto its outcome-class string."""
    if isinstance(exc, CpiViolation):
        return f"CpiViolation({exc.kind.value})"
    if isinstance(exc, CfiViolation):
        return "CfiViolation"
    if isinstance(exc, GcsStoreFault):
        return exc.fault.kind
    rule = getattr(exc, "rule", None)
    if rule is not None:
        return f"Rejected({rule})"
    reason = getattr(exc, "reason", None)
    if reason is not None:
        return f"SwitchRejected({reason})"
    return type(exc).__name__


class Interpreter:
    def __init__(self, world, core_id: int = 0):
        self.world = world
        self.core = world.cores[core_id]
        self.cpi = world.threads[core_id]
        self.symbols = world.symbols(core_id)
        self.vars: Dict[str, object] = {}
        self.pending: Dict[str, int] = {}     # tagged values waiting for their store
        self.verified: Dict[str, int] = {}    # checked call targets, consumed by icall
        self.stack: List[int] = []

    def _addr(self, tok: str) -> int:
        sym, _, off = tok.partition("+")
        base = self.symbols[sym] if sym in self.symbols else int(sym, 0)
        return base + (int(off, 0) if off else 0)

    def _value(self, tok: str):
        try:
            return int(tok, 0)
        except ValueError:
            return self.vars.get(tok, tok)

    def _mem(self, addr: int, kind: AccessKind, value: int = 0) -> None:
        m = self.world.machine
        if kind is AccessKind.READ:
            _, fault = m.load(self.core, self.world.aspace, addr, Mode.USER)
        else:
            fault = m.store(self.core, self.world.aspace, addr, value, kind=kind, mode=Mode.USER)
        if fault is not None:
            raise _Stop(fault.kind, str(fault))

    def _fnptr_store(self, prog: ToyProgram, dst: str, fn: str) -> None:
        self.vars[dst] = self.pending.pop(dst, untagged(prog.address_of(fn)))

    def run(self, prog: ToyProgram) -> ExecResult:
        res = ExecResult()
        code_base = self.symbols["code"]
        for slot, tagged in zip((g[0] for g in prog.globals),
                                self.cpi.load_globals([(s, prog.address_of(fn), sig)
                                                       for s, fn, sig in prog.globals])):
            self.vars[slot] = tagged
        for pc, line in enumerate(prog.lines):
            try:
                self._step(prog, line.instr, pc, code_base, res)
            except _Stop as stop:
                res.outcome, res.pc, res.detail = stop.outcome, pc, stop.detail
                return res
            except (CpiViolation, CfiViolation, GcsStoreFault) as exc:
                res.outcome, res.pc, res.detail = outcome_of(exc), pc, str(exc)
                return res
        return res

    def _step(self, prog, ins, pc, code_base, res) -> None:
        if isinstance(ins, PimBackup):
            self.pending[ins.dst] = self.cpi.backup(untagged(prog.address_of(ins.fn)), ins.sig)
        elif isinstance(ins, (StoreFnPtr, BitcastStore)):
            self._fnptr_store(prog, ins.dst, ins.fn)
        elif isinstance(ins, MemCopyInit):
            for name, val, sig in ins.fields:
                dst = f"{ins.dst}.{name}"
                if sig is None:
                    self.vars[dst] = self._value(val)
                else:
                    self._fnptr_store(prog, dst, val)
        elif isinstance(ins, PimCheck):
            self.verified[ins.src] = self.cpi.check(int(self.vars.get(ins.src, 0)), ins.sig)
        elif isinstance(ins, IndirectCall):
            target = self.verified.pop(ins.src, None)
            if target is None:
                target = untag(int(self.vars.get(ins.src, 0)))
            res.calls.append(target)
        elif isinstance(ins, DirectCall):
            ret = code_base + INSN_BYTES * (pc + 1)
            self.stack.append(ret)
            self.cpi.gcs_push(ret)
        elif isinstance(ins, Ret):
            lr = self.stack.pop() if self.stack else 0
            self.cpi.gcs_ret(lr)
        elif isinstance(ins, RawGcsStore):
            self._mem(self._addr(ins.dst), AccessKind.GCS_STORE, int(ins.val, 0))
        elif isinstance(ins, RawPorWrite):
            user_write_por(self.core, ins.slot, ins.enc)
        elif isinstance(ins, Plain):
            self._plain(ins)

    def _plain(self, ins: Plain) -> None:
        op, a = ins.op, ins.args
        if op == "str":
            self._mem(self._addr(a[0]), AccessKind.WRITE, int(a[1], 0))
        elif op == "ldr":
            self._mem(self._addr(a[0]), AccessKind.READ)
        elif op == "set":
            self.vars[a[0]] = int(a[1], 0)
        elif op == "clobber":
            old = int(self.vars.get(a[0], 0))
            self.vars[a[0]] = (old & ~ADDR_MASK) | (int(a[1], 0) & ADDR_MASK)
        elif op == "copy":
            self.vars[a[0]] = self.vars.get(a[1], 0)
        elif op == "smash_ret":
            if self.stack:
                self.stack[-1] = int(a[0], 0)
        elif op != "nop":
            log.debug("treating unknown op %r as nop", op)


def execute(world, prog: ToyProgram, core_id: int = 0) -> ExecResult:
    return Interpreter(world, core_id).run(prog)
