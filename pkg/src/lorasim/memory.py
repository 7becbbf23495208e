"""Adapter weight memory: a paged pool with per-adapter page tables, and a
first-fit contiguous arena used as the fragmentation baseline.

Both expose the same small manager surface (``fits``, ``alloc``, ``free``,
``feasible_after``, ``report``, ``compact``) so the engine can swap them.
"""
from __future__ import annotations

import bisect
import heapq
import json
from dataclasses import dataclass, field
from typing import Iterable

from .adapters import MiB

DEFAULT_PAGE_SIZE = 2 * MiB


class OutOfMemory(Exception):
    """Not enough free capacity; the caller is expected to evict and retry."""
    code = "oom"


class FragmentationFailure(OutOfMemory):
    """Enough free bytes in total, but no contiguous region large enough."""
    code = "external_fragmentation"


class AllocatorError(RuntimeError):
    """Bookkeeping misuse (double free, stale table). Always a bug."""


@dataclass(frozen=True)
class FragmentationReport:
    external_frag: float
    internal_frag: float
    utilization: float


def pages_needed(nbytes: int, page_size: int) -> int:
    return -(-nbytes // page_size)


@dataclass
class PageTable:
    adapter_id: str
    nbytes: int
    entries: list[int]

    def __len__(self):
        return len(self.entries)


def translate(table: PageTable, logical_page: int) -> int:
    if not 0 <= logical_page < len(table.entries):
        raise IndexError(
            f"logical page {logical_page} out of range for {table.adapter_id!r} "
            f"({len(table.entries)} pages)")
    return table.entries[logical_page]


class PagePool:
    """Fixed-size page inventory. Free pages are handed out lowest index first."""

    def __init__(self, total_pages: int, page_size: int = DEFAULT_PAGE_SIZE):
        if total_pages < 1 or page_size < 1:
            raise ValueError("page pool needs at least one page of positive size")
        self.page_size = page_size
        self.total_pages = total_pages
        self._free = list(range(total_pages))  # min-heap
        self.allocated: dict[int, str] = {}
        self.tables: dict[str, PageTable] = {}
        self.used_bytes = 0

    @classmethod
    def from_bytes(cls, pool_bytes: int, page_size: int = DEFAULT_PAGE_SIZE) -> "PagePool":
        return cls(pool_bytes // page_size, page_size)

    @property
    def free_pages(self) -> int:
        return len(self._free)

    @property
    def total_bytes(self) -> int:
        return self.total_pages * self.page_size

    @property
    def free_bytes(self) -> int:
        return self.free_pages * self.page_size

    @property
    def allocated_bytes(self) -> int:
        return len(self.allocated) * self.page_size

    def free_list(self) -> set[int]:
        return set(self._free)

    def pages_for(self, nbytes: int) -> int:
        return pages_needed(nbytes, self.page_size)

    def fits(self, nbytes: int) -> bool:
        return self.pages_for(nbytes) <= len(self._free)

    def feasible_after(self, released: Iterable[str], nbytes: int) -> bool:
        gain = sum(len(self.tables[a]) for a in released)
        return self.pages_for(nbytes) <= len(self._free) + gain

    def __contains__(self, adapter_id: str) -> bool:
        return adapter_id in self.tables

    def alloc(self, adapter_id: str, nbytes: int) -> PageTable:
        if adapter_id in self.tables:
            raise AllocatorError(f"adapter {adapter_id!r} already holds pages")
        if nbytes <= 0:
            raise ValueError("allocation size must be positive")
        n = self.pages_for(nbytes)
        if n > len(self._free):
            raise OutOfMemory(f"need {n} pages, {len(self._free)} free")
        entries = [heapq.heappop(self._free) for _ in range(n)]
        for p in entries:
            self.allocated[p] = adapter_id
        table = PageTable(adapter_id, nbytes, entries)
        self.tables[adapter_id] = table
        self.used_bytes += nbytes
        return table

    def free(self, table: PageTable | str) -> None:
        if isinstance(table, str):
            if table not in self.tables:
                raise AllocatorError(f"adapter {table!r} holds no pages")
            table = self.tables[table]
        live = self.tables.get(table.adapter_id)
        if live is not table or any(self.allocated.get(p) != table.adapter_id
                                    for p in table.entries):
            raise AllocatorError(f"stale or foreign page table for {table.adapter_id!r}")
        for p in table.entries:
            del self.allocated[p]
            heapq.heappush(self._free, p)
        del self.tables[table.adapter_id]
        self.used_bytes -= table.nbytes

    def scatter(self) -> int:
        """Allocated pages lying outside the would-be compact prefix."""
        n = len(self.allocated)
        return sum(1 for p in self.allocated if p >= n)

    def compact(self) -> int:
        """Move allocated pages into a contiguous prefix; returns relocations."""
        n = len(self.allocated)
        holes = sorted(p for p in self._free if p < n)
        movers = sorted(p for p in self.allocated if p >= n)
        assert len(holes) == len(movers)
        if not movers:
            return 0
        remap = dict(zip(movers, holes))
        for src, dst in remap.items():
            self.allocated[dst] = self.allocated.pop(src)
        for table in self.tables.values():
            table.entries = [remap.get(p, p) for p in table.entries]
        self._free = list(range(n, self.total_pages))
        return len(remap)

    def report(self) -> FragmentationReport:
        alloc = self.allocated_bytes
        internal = (alloc - self.used_bytes) / alloc if alloc else 0.0
        return FragmentationReport(0.0, internal, self.used_bytes / self.total_bytes)

    def check(self) -> None:
        """Assert pool invariants; used by tests and debug runs."""
        free = set(self._free)
        assert len(free) == len(self._free), "duplicate free page"
        assert not free & self.allocated.keys(), "page both free and allocated"
        assert len(free) + len(self.allocated) == self.total_pages, "conservation"
        seen = set()
        for aid, t in self.tables.items():
            assert len(t.entries) == self.pages_for(t.nbytes)
            for p in t.entries:
                assert p not in seen, "physical page mapped twice"
                assert self.allocated[p] == aid
                seen.add(p)
        assert seen == self.allocated.keys()

    def dump(self) -> dict:
        owners = [self.allocated.get(p) for p in range(self.total_pages)]
        return {"kind": "paged", "page_size": self.page_size, "owners": owners,
                "tables": {a: t.entries for a, t in sorted(self.tables.items())}}


@dataclass
class BlockRegion:
    offset: int
    length: int
    owner: str | None = None

    @property
    def end(self) -> int:
        return self.offset + self.length


@dataclass
class BlockArena:
    """First-fit contiguous allocator with coalescing on free."""
    total_bytes: int
    regions: list[BlockRegion] = field(default_factory=list)
    frag_failures: int = 0

    def __post_init__(self):
        if self.total_bytes < 1:
            raise ValueError("arena must be non-empty")
        if not self.regions:
            self.regions = [BlockRegion(0, self.total_bytes)]
        self._owned = {r.owner: r for r in self.regions if r.owner is not None}

    @property
    def used_bytes(self) -> int:
        return sum(r.length for r in self._owned.values())

    allocated_bytes = used_bytes

    @property
    def free_bytes(self) -> int:
        return self.total_bytes - self.used_bytes

    def largest_free(self) -> int:
        return max((r.length for r in self.regions if r.owner is None), default=0)

    def fits(self, nbytes: int) -> bool:
        return self.largest_free() >= nbytes

    def __contains__(self, adapter_id: str) -> bool:
        return adapter_id in self._owned

    def feasible_after(self, released: Iterable[str], nbytes: int) -> bool:
        released = set(released)
        run = best = 0
        for r in self.regions:
            if r.owner is None or r.owner in released:
                run += r.length
                best = max(best, run)
            else:
                run = 0
        return best >= nbytes

    def alloc(self, adapter_id: str, nbytes: int) -> BlockRegion:
        if adapter_id in self._owned:
            raise AllocatorError(f"adapter {adapter_id!r} already holds a region")
        if nbytes <= 0:
            raise ValueError("allocation size must be positive")
        for i, r in enumerate(self.regions):
            if r.owner is None and r.length >= nbytes:
                mine = BlockRegion(r.offset, nbytes, adapter_id)
                if r.length == nbytes:
                    self.regions[i] = mine
                else:
                    self.regions[i:i + 1] = [mine, BlockRegion(r.offset + nbytes, r.length - nbytes)]
                self._owned[adapter_id] = mine
                return mine
        if self.free_bytes >= nbytes:
            self.frag_failures += 1
            raise FragmentationFailure(
                f"{self.free_bytes} bytes free but largest hole is {self.largest_free()}")
        raise OutOfMemory(f"need {nbytes} bytes, {self.free_bytes} free")

    def free(self, adapter_id: str) -> None:
        region = self._owned.pop(adapter_id, None)
        if region is None:
            raise AllocatorError(f"adapter {adapter_id!r} holds no region")
        i = self._index(region)
        region.owner = None
        # coalesce with right then left neighbour
        if i + 1 < len(self.regions) and self.regions[i + 1].owner is None:
            region.length += self.regions.pop(i + 1).length
        if i > 0 and self.regions[i - 1].owner is None:
            left = self.regions[i - 1]
            left.length += region.length
            del self.regions[i]

    def _index(self, region: BlockRegion) -> int:
        i = bisect.bisect_left([r.offset for r in self.regions], region.offset)
        assert self.regions[i] is region
        return i

    def compact(self) -> int:
        """Slide owned regions left; returns bytes moved."""
        moved = 0
        offset = 0
        live = []
        for r in self.regions:
            if r.owner is None:
                continue
            if r.offset != offset:
                moved += r.length
                r.offset = offset
            offset += r.length
            live.append(r)
        if offset < self.total_bytes:
            live.append(BlockRegion(offset, self.total_bytes - offset))
        self.regions = live
        return moved

    def report(self) -> FragmentationReport:
        free = self.free_bytes
        ext = 1.0 - self.largest_free() / free if free else 0.0
        return FragmentationReport(ext, 0.0, self.used_bytes / self.total_bytes)

    def check(self) -> None:
        pos = 0
        for a, b in zip(self.regions, self.regions[1:]):
            assert not (a.owner is None and b.owner is None), "uncoalesced free regions"
        for r in self.regions:
            assert r.offset == pos and r.length > 0, "regions must tile the arena"
            pos = r.end
        assert pos == self.total_bytes
        assert {r.owner for r in self.regions if r.owner} == self._owned.keys()

    def dump(self) -> dict:
        return {"kind": "block", "total_bytes": self.total_bytes,
                "regions": [[r.offset, r.length, r.owner] for r in self.regions]}


def dump_state(mem: PagePool | BlockArena) -> str:
    return json.dumps(mem.dump(), sort_keys=True)
