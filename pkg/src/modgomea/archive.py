"""Elitist archive of solutions that are non-dominated in (size, R^2)."""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np


@dataclass(eq=False)
class ArchiveEntry:
    size: float
    r2: float
    genotype: Any = None
    info: dict = field(default_factory=dict)


def dominates(a_size, a_r2, b_size, b_r2) -> bool:
    """Weak-or-better domination: ``a`` is no worse in both, better in one."""
    return (a_size <= b_size and a_r2 >= b_r2) and (a_size < b_size or a_r2 > b_r2)


def _better(a: ArchiveEntry, b: ArchiveEntry) -> bool:
    return a.r2 > b.r2 or (a.r2 == b.r2 and a.size < b.size)


class ParetoArchive:
    """Bounded archive with an adaptive grid.

    Size is minimised and R^2 maximised.  When the archive grows past
    ``target_capacity``, the objective bounding box is cut into a uniform grid
    (the finest resolution that leaves at most ``target_capacity`` occupied
    cells) and only the best entry of each cell survives.  Once a grid exists,
    a candidate landing in an occupied cell must beat that cell's occupant.
    """

    def __init__(self, target_capacity: int = 100):
        if target_capacity < 1:
            raise ValueError("target_capacity must be positive")
        self.target_capacity = target_capacity
        self.entries: list[ArchiveEntry] = []
        self.grid: Optional[tuple] = None  # (lo, width, divisions)
        self.insertions = 0
        self.last_change: Optional[int] = None
        self.stamp = 0  # caller-maintained generation counter
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(list(self.entries))

    def _cell(self, size, r2):
        lo, width, div = self.grid
        out = []
        for value, low, w in zip((size, r2), lo, width):
            idx = 0 if w <= 0 else int((value - low) / w * div)
            out.append(min(max(idx, 0), div - 1))
        return tuple(out)

    def _inside_grid(self, size, r2) -> bool:
        lo, width, div = self.grid
        return all(low <= v <= low + w for v, low, w in zip((size, r2), lo, width))

    def try_insert(self, size: float, r2: float, genotype=None, info=None) -> bool:
        if not (math.isfinite(size) and math.isfinite(r2)):
            return False
        with self._lock:
            return self._insert(ArchiveEntry(size, r2, genotype, dict(info or {})))

    def _insert(self, cand: ArchiveEntry) -> bool:
        dominated = []
        for e in self.entries:
            if e.size <= cand.size and e.r2 >= cand.r2:
                return False
            if cand.size <= e.size and cand.r2 >= e.r2:
                dominated.append(e)

        displaced = []
        if self.grid is not None and self._inside_grid(cand.size, cand.r2):
            cell = self._cell(cand.size, cand.r2)
            for e in self.entries:
                if any(e is d for d in dominated) or self._cell(e.size, e.r2) != cell:
                    continue
                if not _better(cand, e):
                    return False
                displaced.append(e)

        gone = {id(e) for e in dominated + displaced}
        self.entries = [e for e in self.entries if id(e) not in gone]
        self.entries.append(cand)
        if len(self.entries) > self.target_capacity:
            self._regrid()
        self.insertions += 1
        self.last_change = self.stamp
        return True

    def _regrid(self):
        sizes = np.array([e.size for e in self.entries], dtype=float)
        r2s = np.array([e.r2 for e in self.entries], dtype=float)
        lo = (sizes.min(), r2s.min())
        width = (sizes.max() - lo[0], r2s.max() - lo[1])
        for div in range(self.target_capacity, 0, -1):
            self.grid = (lo, width, div)
            cells = {}
            for e in self.entries:
                key = self._cell(e.size, e.r2)
                if key not in cells or _better(e, cells[key]):
                    cells[key] = e
            if len(cells) <= self.target_capacity:
                break
        self.entries = list(cells.values())

    def best(self) -> Optional[ArchiveEntry]:
        """Entry with the highest R^2 (smallest size on ties)."""
        if not self.entries:
            return None
        return min(self.entries, key=lambda e: (-e.r2, e.size))

    def front(self, describe=None) -> list[tuple]:
        """``(size, r2, text)`` sorted by size; ``describe`` maps an entry to
        its text (defaults to an empty string)."""
        rows = sorted(self.entries, key=lambda e: (e.size, e.r2))
        return [(e.size, e.r2, describe(e) if describe else "") for e in rows]
