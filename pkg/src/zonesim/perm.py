"""Indirect (PIE) and overlay (POE) permission encodings.

A 4-bit encoding decodes to a set of {R, W, X} flags using the layout

    bit0 = read, bit1 = execute, bit2 = write, bit3 = reserved

so ``0b0101`` is read-write and ``0b0111`` is read-write-execute.  Bit 3 is
ignored by the data-page decoder.  Pages whose PIE index is the GCS slot do
not decode to a data permission at all: they resolve to :data:`GCS_CLASS`,
and the overlay register is never consulted for them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Union

log = logging.getLogger(__name__)

PIE_SLOTS = 16
POE_SLOTS = 8
GCS_PIE_INDEX = 11
POR_FIXED_SLOT0 = 0b0111

FULL = 0b0111
RW = 0b0101
NONE = 0b0000


class InvalidPte(Exception):
    """Raised when resolving a PTE whose valid bit is clear."""


@dataclass(frozen=True)
class PermSet:
    read: bool = False
    write: bool = False
    execute: bool = False

    def __and__(self, other: "PermSet") -> "PermSet":
        return PermSet(self.read and other.read,
                       self.write and other.write,
                       self.execute and other.execute)

    def __bool__(self) -> bool:
        return self.read or self.write or self.execute

    def __str__(self) -> str:
        s = "".join(c for c, on in zip("RWX", (self.read, self.write, self.execute)) if on)
        return "{" + s + "}"


@dataclass(frozen=True)
class GcsClass:
    """Guarded-control-stack permission: readable, writable only by gcsstr."""
    read: bool = True
    write: str = "gcsstr-only"
    execute: bool = False

    def __str__(self) -> str:
        return "{GCS}"


GCS_CLASS = GcsClass()
Resolved = Union[PermSet, GcsClass]


def check_encoding(value: int) -> int:
    if not isinstance(value, int) or not 0 <= value <= 0xF:
        raise ValueError(f"permission encoding must be a 4-bit value, got {value!r}")
    return value


def decode_perm(encoding: int, context: str = "data") -> Resolved:
    """Decode a 4-bit encoding. ``context`` is ``"data"`` or ``"gcs"``."""
    check_encoding(encoding)
    if context == "gcs":
        return GCS_CLASS
    if context != "data":
        raise ValueError(f"unknown page context {context!r}")
    return PermSet(read=bool(encoding & 0b0001),
                   write=bool(encoding & 0b0100),
                   execute=bool(encoding & 0b0010))


def encode_perm(perms: PermSet) -> int:
    return (int(perms.read) | int(perms.execute) << 1 | int(perms.write) << 2)


def effective_perm(base: Resolved, overlay: PermSet) -> Resolved:
    """Combine base and overlay; GCS bases pass through untouched."""
    if isinstance(base, GcsClass):
        return base
    return base & overlay


@dataclass(frozen=True)
class PieRegistry:
    """Which PIE slots are fixed, GCS-related, kernel-owned, or free for domains.

    Only slot 4 (default) and slot 11 (GCS) are pinned by hardware
    convention; the reusable set must contain 3 and 6.  The rest of the
    split is an assumption and can be overridden.
    """
    fixed: frozenset = frozenset({0, 1, 2, 4, 5, 8})
    gcs: frozenset = frozenset({10, 11})
    kernel: frozenset = frozenset({12, 13, 14, 15})
    reusable: tuple = (3, 6, 7, 9)

    def __post_init__(self):
        groups = [set(self.fixed), set(self.gcs), set(self.kernel), set(self.reusable)]
        seen = set()
        for g in groups:
            if seen & g:
                raise ValueError("PIE registry groups overlap")
            seen |= g
        if seen != set(range(PIE_SLOTS)):
            raise ValueError("PIE registry must cover all 16 slots")
        if GCS_PIE_INDEX not in self.gcs:
            raise ValueError("slot 11 must stay in the GCS group")
        if len(set(self.reusable)) != len(self.reusable):
            raise ValueError("duplicate reusable slot")


DEFAULT_REGISTRY = PieRegistry()

# Fixed-class contents loaded at process start.  Reusable slots start
# disabled; the Monitor enables exactly one at a time.
DEFAULT_PIE_PROFILE = {
    0: 0b0001,   # R
    1: 0b0011,   # RX (code)
    2: 0b0010,   # X only
    4: RW,       # default data
    5: FULL,
    8: 0b0001,
}


class PireRegister:
    """16-slot base permission register (PIRE0_EL1)."""

    __slots__ = ("slots",)

    def __init__(self, slots: Iterable[int] | None = None):
        if slots is None:
            vals = [0] * PIE_SLOTS
            for i, v in DEFAULT_PIE_PROFILE.items():
                vals[i] = v
        else:
            vals = [check_encoding(v) for v in slots]
            if len(vals) != PIE_SLOTS:
                raise ValueError("PIRE register has 16 slots")
        self.slots = vals

    def __getitem__(self, idx: int) -> int:
        return self.slots[idx]

    def __setitem__(self, idx: int, value: int) -> None:
        if not 0 <= idx < PIE_SLOTS:
            raise IndexError(idx)
        self.slots[idx] = check_encoding(value)

    def snapshot(self) -> tuple:
        return tuple(self.slots)

    def zero(self) -> None:
        self.slots = [0] * PIE_SLOTS

    def __eq__(self, other):
        return isinstance(other, PireRegister) and self.slots == other.slots

    def __repr__(self):
        return f"PireRegister({self.slots})"


class PorRegister:
    """8-slot overlay register (POR_EL0). Slot 0 always reads 0b0111."""

    __slots__ = ("slots",)

    def __init__(self, slots: Iterable[int] | None = None):
        vals = [0] * POE_SLOTS if slots is None else [check_encoding(v) for v in slots]
        if len(vals) != POE_SLOTS:
            raise ValueError("POR register has 8 slots")
        vals[0] = POR_FIXED_SLOT0
        self.slots = vals

    def __getitem__(self, idx: int) -> int:
        return self.slots[idx]

    def __setitem__(self, idx: int, value: int) -> None:
        if not 0 <= idx < POE_SLOTS:
            raise IndexError(idx)
        check_encoding(value)
        if idx == 0:
            log.info("ignored write of %s to fixed POR slot 0", format(value, "#06b"))
            return
        self.slots[idx] = value

    def write_all(self, values) -> None:
        """Whole-register write (one ``msr POR_EL0``); slot 0 stays fixed."""
        vals = list(values)
        if len(vals) != POE_SLOTS:
            raise ValueError("POR register has 8 slots")
        if vals[0] != POR_FIXED_SLOT0:
            log.info("ignored write of %s to fixed POR slot 0", format(vals[0], "#06b"))
        vals[0] = POR_FIXED_SLOT0
        self.slots = vals

    def snapshot(self) -> tuple:
        return tuple(self.slots)

    def zero(self) -> None:
        self.slots = [POR_FIXED_SLOT0] + [0] * (POE_SLOTS - 1)

    def __eq__(self, other):
        return isinstance(other, PorRegister) and self.slots == other.slots

    def __repr__(self):
        return f"PorRegister({self.slots})"


@dataclass
class PageTableEntry:
    virt_page: int
    phys_page: int
    pie_idx: int = 4
    poe_idx: int = 0
    is_gcs_page: bool = field(default=None)  # type: ignore[assignment]
    valid: bool = True

    def __post_init__(self):
        if not 0 <= self.pie_idx < PIE_SLOTS:
            raise ValueError(f"pie_idx out of range: {self.pie_idx}")
        if not 0 <= self.poe_idx < POE_SLOTS:
            raise ValueError(f"poe_idx out of range: {self.poe_idx}")
        if self.is_gcs_page is None:
            self.is_gcs_page = self.pie_idx == GCS_PIE_INDEX
        if self.is_gcs_page != (self.pie_idx == GCS_PIE_INDEX):
            raise ValueError("is_gcs_page must match pie_idx == 11")

    def indexes(self) -> tuple:
        return (self.phys_page, self.pie_idx, self.poe_idx, self.is_gcs_page)


def resolve_pte(pte: PageTableEntry, pire: PireRegister, por: PorRegister) -> Resolved:
    if not pte.valid:
        raise InvalidPte(f"PTE for virtual page {pte.virt_page:#x} is not valid")
    if pte.is_gcs_page:
        return GCS_CLASS
    base = decode_perm(pire[pte.pie_idx])
    return effective_perm(base, decode_perm(por[pte.poe_idx]))
