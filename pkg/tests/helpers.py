"""Shared fixtures for allocator churn and small engine runs."""
from __future__ import annotations

import numpy as np

from lorasim.adapters import MiB, AdapterSpec
from lorasim.memory import AllocatorError, BlockArena, FragmentationFailure, OutOfMemory, PagePool


def churn_ops(seed: int, n_ops: int, n_ids: int, sizes: list[int], p_alloc: float = 0.55):
    """Random alloc/free sequence over ``n_ids`` adapter ids; sizes are fixed per id."""
    rng = np.random.default_rng(seed)
    size_of = {f"a{i}": int(sizes[rng.integers(len(sizes))]) for i in range(n_ids)}
    live: list[str] = []
    ops = []
    for _ in range(n_ops):
        if live and (rng.random() > p_alloc or len(live) == n_ids):
            ops.append(("free", live.pop(rng.integers(len(live)))))
        else:
            dead = [a for a in size_of if a not in live]
            a = dead[rng.integers(len(dead))]
            ops.append(("alloc", a, size_of[a]))
            live.append(a)
    return ops


class ChurnResult:
    def __init__(self):
        self.violations: list[str] = []
        self.allocs = self.ooms = self.frag_failures = 0
        self.insufficient_despite_room = 0


def replay_paged(pool: PagePool, ops, full_check_every: int = 1) -> ChurnResult:
    """Apply ``ops`` and compare against a reference set after every step.

    Failed allocations are dropped from the reference, so later frees of that id
    are skipped.
    """
    out = ChurnResult()
    ref: dict[str, int] = {}        # adapter -> pages, the reference model
    for step, op in enumerate(ops):
        if op[0] == "alloc":
            _, a, nbytes = op
            need = -(-nbytes // pool.page_size)
            room = pool.free_pages * pool.page_size >= nbytes
            before = pool.dump()
            try:
                table = pool.alloc(a, nbytes)
                ref[a] = need
                out.allocs += 1
                if len(table.entries) != need:
                    out.violations.append(f"{step}: table size")
            except FragmentationFailure:
                out.frag_failures += 1
            except OutOfMemory:
                out.ooms += 1
                if room:
                    out.insufficient_despite_room += 1
                if pool.dump() != before:
                    out.violations.append(f"{step}: failed alloc changed state")
        else:
            a = op[1]
            if a not in ref:
                continue
            pool.free(a)
            del ref[a]
        if set(pool.tables) != set(ref):
            out.violations.append(f"{step}: live set differs")
        if pool.free_pages != pool.total_pages - sum(ref.values()):
            out.violations.append(f"{step}: conservation")
        if step % full_check_every == 0:
            try:
                pool.check()
            except AssertionError as e:
                out.violations.append(f"{step}: {e}")
    return out


def replay_block(arena: BlockArena, ops) -> ChurnResult:
    out = ChurnResult()
    live: set[str] = set()
    for step, op in enumerate(ops):
        if op[0] == "alloc":
            _, a, nbytes = op
            before = arena.dump()
            try:
                arena.alloc(a, nbytes)
                live.add(a)
                out.allocs += 1
            except FragmentationFailure:
                out.frag_failures += 1
                out.insufficient_despite_room += 1
                if arena.dump() != before:
                    out.violations.append(f"{step}: failed alloc changed state")
            except OutOfMemory:
                out.ooms += 1
        elif op[1] in live:
            arena.free(op[1])
            live.discard(op[1])
        try:
            arena.check()
        except AssertionError as e:
            out.violations.append(f"{step}: {e}")
    return out


def adversarial_ops():
    """Fill with alternating small and large adapters, free every small one, then
    ask for something bigger than any hole but smaller than the free total."""
    small, large = 14 * MiB, 104 * MiB
    ops = []
    for i in range(6):
        ops.append(("alloc", f"s{i}", small))
        ops.append(("alloc", f"l{i}", large))
    for i in range(6):
        ops.append(("free", f"s{i}"))
    ops.append(("alloc", "big", 3 * small))
    return ops, 6 * (small + large)


def uniform_catalog(ids, rank: int = 8) -> list[AdapterSpec]:
    return [AdapterSpec.from_rank(a, rank) for a in ids]


__all__ = ["AllocatorError", "ChurnResult", "adversarial_ops", "churn_ops", "replay_block",
           "replay_paged", "uniform_catalog"]
