"""Toy IR for the CPI instrumentation pass and the post-build binary scan.

Text format, one instruction per line, ``#`` starts a comment::

    .func NAME ADDR                 optional symbol address (hex or decimal)
    .global SLOT FN SIG             initialized global code pointer
    .trampoline_begin / .trampoline_end
    store_fnptr DST FN SIG          store a function pointer
    memcpy_init DST F=FN@SIG F=VAL  struct copy; FN@SIG fields are code pointers
    bitcast_store DST FN ORIG_SIG   store through a universal (void*) pointer
    icall SRC SIG                   indirect call with the call-site type
    call FN                         direct call (pushes a return address)
    ret
    gcsstr ADDR VAL                 raw GCS store
    msr_por SLOT ENC                raw overlay-register write
    pim_backup DST FN SIG           inserted by the instrumentation pass
    pim_check SRC SIG               inserted by the instrumentation pass
    OP ARGS...                      anything else is a plain instruction

Signatures are written without whitespace, e.g. ``void(int,char*)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple, Union

from .cpi import canonical_signature

log = logging.getLogger(__name__)


class MalformedProgram(ValueError):
    def __init__(self, msg: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


@dataclass(frozen=True)
class StoreFnPtr:
    dst: str
    fn: str
    sig: str


@dataclass(frozen=True)
class MemCopyInit:
    dst: str
    fields: Tuple[Tuple[str, str, Optional[str]], ...]   # (name, value, sig or None)

    def fnptr_fields(self):
        return [(n, v, s) for n, v, s in self.fields if s is not None]


@dataclass(frozen=True)
class BitcastStore:
    dst: str
    fn: str
    orig_sig: str


@dataclass(frozen=True)
class IndirectCall:
    src: str
    sig: str


@dataclass(frozen=True)
class DirectCall:
    fn: str


@dataclass(frozen=True)
class Ret:
    pass


@dataclass(frozen=True)
class RawGcsStore:
    dst: str
    val: str


@dataclass(frozen=True)
class RawPorWrite:
    slot: int
    enc: int


@dataclass(frozen=True)
class PimBackup:
    dst: str
    fn: str
    sig: str


@dataclass(frozen=True)
class PimCheck:
    src: str
    sig: str


@dataclass(frozen=True)
class Plain:
    op: str
    args: Tuple[str, ...] = ()


Instr = Union[StoreFnPtr, MemCopyInit, BitcastStore, IndirectCall, DirectCall, Ret,
              RawGcsStore, RawPorWrite, PimBackup, PimCheck, Plain]


@dataclass(frozen=True)
class Line:
    instr: Instr
    trampoline: bool = False


@dataclass
class ToyProgram:
    lines: List[Line] = field(default_factory=list)
    globals: List[Tuple[str, str, str]] = field(default_factory=list)   # (slot, fn, sig)
    funcs: dict = field(default_factory=dict)

    @property
    def instrs(self) -> List[Instr]:
        return [ln.instr for ln in self.lines]

    def __eq__(self, other):
        return (isinstance(other, ToyProgram) and self.lines == other.lines
                and self.globals == other.globals and self.funcs == other.funcs)

    def copy(self) -> "ToyProgram":
        return ToyProgram(list(self.lines), list(self.globals), dict(self.funcs))

    def address_of(self, fn: str) -> int:
        """Symbol address; unknown functions get stable auto-assigned slots."""
        if fn not in self.funcs:
            self.funcs[fn] = 0x400000 + 0x100 * (len(self.funcs) + 1)
        return self.funcs[fn]


def _int(tok: str, lineno: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise MalformedProgram(f"expected an integer, got {tok!r}", lineno) from None


def _sig(tok: str, lineno: int) -> str:
    try:
        return canonical_signature(tok)
    except ValueError as exc:
        raise MalformedProgram(str(exc), lineno) from None


_ARITY = {"store_fnptr": 3, "bitcast_store": 3, "icall": 2, "call": 1, "ret": 0,
          "gcsstr": 2, "msr_por": 2, "pim_backup": 3, "pim_check": 2}


def parse_program(text: str) -> ToyProgram:
    prog = ToyProgram()
    in_tramp = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        op, *args = line.split()
        if op == ".trampoline_begin":
            if in_tramp:
                raise MalformedProgram("nested trampoline", lineno)
            in_tramp = True
            continue
        if op == ".trampoline_end":
            if not in_tramp:
                raise MalformedProgram("trampoline end without begin", lineno)
            in_tramp = False
            continue
        if op == ".func":
            if len(args) != 2:
                raise MalformedProgram(".func takes NAME ADDR", lineno)
            prog.funcs[args[0]] = _int(args[1], lineno)
            continue
        if op == ".global":
            if len(args) != 3:
                raise MalformedProgram(".global takes SLOT FN SIG", lineno)
            prog.globals.append((args[0], args[1], _sig(args[2], lineno)))
            continue
        if op.startswith("."):
            raise MalformedProgram(f"unknown directive {op}", lineno)
        if op in _ARITY and len(args) != _ARITY[op]:
            raise MalformedProgram(f"{op} takes {_ARITY[op]} operands, got {len(args)}", lineno)
        if op == "store_fnptr":
            ins = StoreFnPtr(args[0], args[1], _sig(args[2], lineno))
        elif op == "bitcast_store":
            ins = BitcastStore(args[0], args[1], _sig(args[2], lineno))
        elif op == "memcpy_init":
            if not args:
                raise MalformedProgram("memcpy_init needs a destination", lineno)
            fields = []
            for f in args[1:]:
                if "=" not in f:
                    raise MalformedProgram(f"bad field {f!r}", lineno)
                name, val = f.split("=", 1)
                if "@" in val:
                    fn, sig = val.split("@", 1)
                    fields.append((name, fn, _sig(sig, lineno)))
                else:
                    fields.append((name, val, None))
            ins = MemCopyInit(args[0], tuple(fields))
        elif op == "icall":
            ins = IndirectCall(args[0], _sig(args[1], lineno))
        elif op == "call":
            ins = DirectCall(args[0])
        elif op == "ret":
            ins = Ret()
        elif op == "gcsstr":
            ins = RawGcsStore(args[0], args[1])
        elif op == "msr_por":
            ins = RawPorWrite(_int(args[0], lineno), _int(args[1], lineno))
        elif op == "pim_backup":
            ins = PimBackup(args[0], args[1], _sig(args[2], lineno))
        elif op == "pim_check":
            ins = PimCheck(args[0], _sig(args[1], lineno))
        else:
            ins = Plain(op, tuple(args))
        prog.lines.append(Line(ins, in_tramp))
    if in_tramp:
        raise MalformedProgram("unterminated trampoline")
    return prog


def format_instr(ins: Instr) -> str:
    if isinstance(ins, StoreFnPtr):
        return f"store_fnptr {ins.dst} {ins.fn} {ins.sig}"
    if isinstance(ins, BitcastStore):
        return f"bitcast_store {ins.dst} {ins.fn} {ins.orig_sig}"
    if isinstance(ins, MemCopyInit):
        parts = [f"{n}={v}@{s}" if s is not None else f"{n}={v}" for n, v, s in ins.fields]
        return " ".join(["memcpy_init", ins.dst, *parts])
    if isinstance(ins, IndirectCall):
        return f"icall {ins.src} {ins.sig}"
    if isinstance(ins, DirectCall):
        return f"call {ins.fn}"
    if isinstance(ins, Ret):
        return "ret"
    if isinstance(ins, RawGcsStore):
        return f"gcsstr {ins.dst} {ins.val}"
    if isinstance(ins, RawPorWrite):
        return f"msr_por {ins.slot} {ins.enc:#06b}"
    if isinstance(ins, PimBackup):
        return f"pim_backup {ins.dst} {ins.fn} {ins.sig}"
    if isinstance(ins, PimCheck):
        return f"pim_check {ins.src} {ins.sig}"
    return " ".join([ins.op, *ins.args])


def format_program(prog: ToyProgram) -> str:
    out = []
    for name, addr in prog.funcs.items():
        out.append(f".func {name} {addr:#x}")
    for slot, fn, sig in prog.globals:
        out.append(f".global {slot} {fn} {sig}")
    in_tramp = False
    for ln in prog.lines:
        if ln.trampoline != in_tramp:
            out.append(".trampoline_begin" if ln.trampoline else ".trampoline_end")
            in_tramp = ln.trampoline
        out.append(("    " if in_tramp else "") + format_instr(ln.instr))
    if in_tramp:
        out.append(".trampoline_end")
    return "\n".join(out) + "\n"


def _backups_for(ins: Instr) -> List[PimBackup]:
    if isinstance(ins, StoreFnPtr):
        return [PimBackup(ins.dst, ins.fn, ins.sig)]
    if isinstance(ins, BitcastStore):
        return [PimBackup(ins.dst, ins.fn, ins.orig_sig)]
    if isinstance(ins, MemCopyInit):
        return [PimBackup(f"{ins.dst}.{n}", fn, sig) for n, fn, sig in ins.fnptr_fields()]
    return []


def instrument(prog: ToyProgram) -> ToyProgram:
    """Insert PIM backups before code-pointer stores and checks before indirect calls.

    The trampoline is hand-written and left alone.  Running the pass twice
    adds nothing.
    """
    out: List[Line] = []
    for ln in prog.lines:
        ins = ln.instr
        if ln.trampoline:
            out.append(ln)
            continue
        if isinstance(ins, IndirectCall):
            need = [PimCheck(ins.src, ins.sig)]
        else:
            need = _backups_for(ins)
        if need:
            have = [x.instr for x in out[len(out) - len(need):]] if len(out) >= len(need) else []
            if have != need:
                out.extend(Line(x) for x in need)
        out.append(ln)
    return ToyProgram(out, list(prog.globals), dict(prog.funcs))


@dataclass(frozen=True)
class ScanReport:
    gcs_rewrites: int
    por_removed: int

    @property
    def rewrites(self) -> int:
        return self.gcs_rewrites + self.por_removed


def binary_scan(prog: ToyProgram) -> Tuple[ToyProgram, ScanReport]:
    """Strip switching and GCS-store instructions found outside the trampoline.

    A stray ``gcsstr`` becomes an ordinary store (which then faults on GCS
    pages); a stray ``msr_por`` becomes a ``nop``.
    """
    out: List[Line] = []
    gcs = por = 0
    for ln in prog.lines:
        ins = ln.instr
        if not ln.trampoline and isinstance(ins, RawGcsStore):
            out.append(replace(ln, instr=Plain("str", (ins.dst, ins.val))))
            gcs += 1
        elif not ln.trampoline and isinstance(ins, RawPorWrite):
            log.info("binary scan neutralized msr_por %d, %s", ins.slot, format(ins.enc, "#06b"))
            out.append(replace(ln, instr=Plain("nop", ("msr_por", str(ins.slot), f"{ins.enc:#06b}"))))
            por += 1
        else:
            out.append(ln)
    return ToyProgram(out, list(prog.globals), dict(prog.funcs)), ScanReport(gcs, por)


@dataclass(frozen=True)
class Counts:
    backups: int
    checks: int


def count_inserted(before: ToyProgram, after: ToyProgram) -> Counts:
    def tally(p):
        b = sum(isinstance(i, PimBackup) for i in p.instrs)
        c = sum(isinstance(i, PimCheck) for i in p.instrs)
        return b, c
    b0, c0 = tally(before)
    b1, c1 = tally(after)
    return Counts(b1 - b0, c1 - c0)
