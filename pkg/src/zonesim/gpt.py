"""Granule protection tables, granule protection checks and bypass windows."""
from __future__ import annotations

import bisect
import enum
import itertools
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

GiB = 1 << 30
DEFAULT_GRANULE = 4096
WINDOW_MIN = 1 * GiB
WINDOW_MAX = 64 * GiB


class PasLabel(enum.Enum):
    NORMAL = "normal"
    SECURE = "secure"
    REALM = "realm"
    ROOT = "root"
    FULL_ACCESS = "full-access"
    NO_ACCESS = "no-access"


class SecurityState(enum.Enum):
    NORMAL = "normal"
    SECURE = "secure"
    REALM = "realm"
    ROOT = "root"


# Rows are security states, entries the labels each state may touch.  The
# root row and the FullAccess / NoAccess / Root columns are fixed by
# gpc_check itself; only Normal/Secure/Realm entries of the other rows are
# read from the table.
DEFAULT_ACCESS = {
    SecurityState.ROOT: frozenset(PasLabel),
    SecurityState.NORMAL: frozenset({PasLabel.NORMAL, PasLabel.FULL_ACCESS}),
    SecurityState.SECURE: frozenset({PasLabel.SECURE, PasLabel.NORMAL, PasLabel.FULL_ACCESS}),
    SecurityState.REALM: frozenset({PasLabel.REALM, PasLabel.NORMAL, PasLabel.FULL_ACCESS}),
}


class GptError(Exception):
    pass


class NotRoot(GptError):
    pass


class InvalidRange(GptError, ValueError):
    pass


@dataclass(frozen=True)
class Gpf:
    """Granule protection fault. Returned, not raised."""
    paddr: int
    granule: int
    label: PasLabel
    state: SecurityState


class IntervalMap:
    """Half-open integer intervals carrying a value; everything else is ``default``.

    Stored as sorted, disjoint, non-adjacent-equal runs so GiB-sized ranges
    cost O(1) memory.
    """

    def __init__(self, default):
        self.default = default
        self._starts: list[int] = []
        self._runs: list[tuple[int, int, object]] = []

    def get(self, key: int):
        i = bisect.bisect_right(self._starts, key) - 1
        if i >= 0:
            s, e, v = self._runs[i]
            if key < e:
                return v
        return self.default

    def assign(self, start: int, end: int, value) -> None:
        if end <= start:
            raise InvalidRange(f"empty range [{start}, {end})")
        keep = []
        for s, e, v in self._runs:
            if e <= start or s >= end:
                keep.append((s, e, v))
                continue
            if s < start:
                keep.append((s, start, v))
            if e > end:
                keep.append((end, e, v))
        if value != self.default:
            keep.append((start, end, value))
        keep.sort()
        merged: list[tuple[int, int, object]] = []
        for s, e, v in keep:
            if merged and merged[-1][1] == s and merged[-1][2] == v:
                merged[-1] = (merged[-1][0], e, v)
            else:
                merged.append((s, e, v))
        self._runs = merged
        self._starts = [s for s, _, _ in merged]

    def runs(self):
        return list(self._runs)

    def copy(self) -> "IntervalMap":
        m = IntervalMap(self.default)
        m._runs = list(self._runs)
        m._starts = list(self._starts)
        return m


_gpt_ids = itertools.count()


class Gpt:
    """Sparse granule → PAS label map. Unmapped granules read as Normal."""

    def __init__(self, gid: Optional[str] = None, granule_size: int = DEFAULT_GRANULE):
        if granule_size <= 0 or granule_size & (granule_size - 1):
            raise ValueError("granule_size must be a power of two")
        self.id = gid if gid is not None else f"gpt{next(_gpt_ids)}"
        self.granule_size = granule_size
        self.granule_map = IntervalMap(PasLabel.NORMAL)

    def label(self, granule: int) -> PasLabel:
        return self.granule_map.get(granule)

    def label_at(self, paddr: int) -> PasLabel:
        return self.granule_map.get(paddr // self.granule_size)

    def set_pas(self, start: int, end: int, label: PasLabel, caller: SecurityState) -> None:
        """Relabel granules ``[start, end)``. Only the root world may do this."""
        if caller is not SecurityState.ROOT:
            raise NotRoot(f"{caller.value} world may not modify GPT {self.id}")
        if end <= start:
            raise InvalidRange(f"invalid granule range [{start}, {end})")
        self.granule_map.assign(start, end, label)

    def clone(self, gid: str) -> "Gpt":
        g = Gpt(gid, self.granule_size)
        g.granule_map = self.granule_map.copy()
        return g

    def __repr__(self):
        return f"Gpt({self.id!r}, runs={len(self.granule_map.runs())})"


@dataclass(frozen=True)
class BypassWindow:
    """A per-core GPC bypass range.

    ``scale`` divides both size bounds, so miniature scenarios keep the 1:64
    ratio between the smallest and largest window.
    """
    base: int
    size: int
    scale: int = 1

    def __post_init__(self):
        lo, hi = WINDOW_MIN // self.scale, WINDOW_MAX // self.scale
        if self.size & (self.size - 1) or not lo <= self.size <= hi:
            raise ValueError(f"window size {self.size:#x} not a power of two in [{lo:#x}, {hi:#x}]")
        if self.base % self.size:
            raise ValueError(f"window base {self.base:#x} not aligned to {self.size:#x}")

    def covers(self, paddr: int) -> bool:
        return self.base <= paddr < self.base + self.size


def window_covers(windows: Iterable[BypassWindow], paddr: int) -> bool:
    return any(w.base <= paddr < w.base + w.size for w in windows)


def label_permits(state: SecurityState, label: PasLabel,
                  matrix: Mapping[SecurityState, frozenset] = DEFAULT_ACCESS) -> bool:
    if state is SecurityState.ROOT or label is PasLabel.FULL_ACCESS:
        return True
    if label is PasLabel.NO_ACCESS or label is PasLabel.ROOT:
        return False
    return label in matrix[state]


def gpc_check(gpt: Gpt, state: SecurityState, paddr: int,
              windows: Sequence[BypassWindow] = (),
              matrix: Mapping[SecurityState, frozenset] = DEFAULT_ACCESS) -> Optional[Gpf]:
    """Return ``None`` if the access passes, else a :class:`Gpf`."""
    if windows and window_covers(windows, paddr):
        return None
    granule = paddr // gpt.granule_size
    label = gpt.granule_map.get(granule)
    if label_permits(state, label, matrix):
        return None
    return Gpf(paddr, granule, label, state)
