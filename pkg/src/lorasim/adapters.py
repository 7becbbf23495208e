"""Adapter catalog: LoRA dimensioning and byte footprints.

All "MB" figures are MiB (2**20 bytes) so page arithmetic stays exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MiB = 1 << 20

#: bytes of a rank-8 adapter on a 7B-class base model; other ranks scale linearly
RANK8_ANCHOR_BYTES = 13 * MiB
DEFAULT_RANKS = (8, 16, 32, 64)


class AdapterConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LoraDims:
    d: int = 4096
    k: int = 4096
    r: int = 8
    adapted_matrices: int = 64
    bytes_per_param: int = 2

    def __post_init__(self):
        if self.r < 1:
            raise AdapterConfigError(f"rank must be >= 1, got {self.r}")
        if self.r >= min(self.d, self.k):
            raise AdapterConfigError(
                f"rank {self.r} must be below min(d, k) = {min(self.d, self.k)}")
        if self.adapted_matrices < 1:
            raise AdapterConfigError("adapted_matrices must be >= 1")
        if self.bytes_per_param not in (1, 2, 4):
            raise AdapterConfigError(
                f"bytes_per_param must be 1, 2 or 4, got {self.bytes_per_param}")


def param_count(dims: LoraDims) -> int:
    """Trainable parameters: ``r * (d + k)`` for each adapted matrix."""
    return dims.adapted_matrices * dims.r * (dims.d + dims.k)


@dataclass(frozen=True)
class SizeTable:
    """Rank -> bytes lookup with optional linear scaling from the rank-8 anchor."""
    sizes: Mapping[int, int] = field(default_factory=dict)
    linear_fallback: bool = True
    anchor_bytes: int = RANK8_ANCHOR_BYTES

    def lookup(self, rank: int) -> int:
        if rank in self.sizes:
            return int(self.sizes[rank])
        if rank < 1:
            raise AdapterConfigError(f"rank must be >= 1, got {rank}")
        if not self.linear_fallback:
            raise AdapterConfigError(
                f"rank {rank} not in size table and linear fallback disabled")
        return self.anchor_bytes * rank // 8


DEFAULT_SIZE_TABLE = SizeTable()


def adapter_size_bytes(rank: int, size_table: SizeTable | None = None) -> int:
    return (size_table or DEFAULT_SIZE_TABLE).lookup(rank)


@dataclass(frozen=True)
class AdapterSpec:
    id: str
    dims: LoraDims
    nominal_size_override: int | None = None

    def __post_init__(self):
        if self.nominal_size_override is not None and self.nominal_size_override <= 0:
            raise AdapterConfigError(f"adapter {self.id}: size must be positive")

    @property
    def rank(self) -> int:
        return self.dims.r

    @property
    def weight_bytes(self) -> int:
        if self.nominal_size_override is not None:
            return self.nominal_size_override
        return param_count(self.dims) * self.dims.bytes_per_param

    @classmethod
    def from_rank(cls, adapter_id: str, rank: int,
                  size_table: SizeTable | None = None,
                  size_bytes: int | None = None) -> "AdapterSpec":
        """Build a catalog entry whose size comes from the size table (or an explicit override)."""
        size = size_bytes if size_bytes is not None else adapter_size_bytes(rank, size_table)
        return cls(str(adapter_id), LoraDims(r=rank), nominal_size_override=int(size))


def load_catalog(path: str | Path, size_table: SizeTable | None = None) -> list[AdapterSpec]:
    """Read a JSON array of ``{id, rank, size_bytes?}`` objects."""
    path = Path(path)
    try:
        rows = json.loads(path.read_text())
    except FileNotFoundError:
        raise AdapterConfigError(f"catalog file not found: {path}") from None
    if not isinstance(rows, list):
        raise AdapterConfigError(f"{path}: catalog must be a JSON array")
    out = []
    seen = set()
    for i, row in enumerate(rows):
        unknown = set(row) - {"id", "rank", "size_bytes"}
        if unknown or "id" not in row or "rank" not in row:
            raise AdapterConfigError(f"{path}: bad catalog entry #{i}: {row!r}")
        aid = str(row["id"])
        if aid in seen:
            raise AdapterConfigError(f"{path}: duplicate adapter id {aid!r}")
        seen.add(aid)
        out.append(AdapterSpec.from_rank(aid, int(row["rank"]), size_table, row.get("size_bytes")))
    return out


def save_catalog(catalog: Iterable[AdapterSpec], path: str | Path) -> None:
    rows = [{"id": a.id, "rank": a.rank, "size_bytes": a.weight_bytes} for a in catalog]
    Path(path).write_text(json.dumps(rows, indent=1))


def build_catalog(adapter_ids: Iterable[str], rank_mix: Mapping[int, float] | None = None,
                  seed: int = 0, size_table: SizeTable | None = None) -> list[AdapterSpec]:
    """Assign ranks to ``adapter_ids`` by sampling ``rank_mix`` (rank -> weight).

    Ids are sorted first so the assignment depends only on the id set and seed.
    """
    ids = sorted(set(adapter_ids))
    rank_mix = rank_mix or {r: 1.0 for r in DEFAULT_RANKS}
    ranks = np.array(sorted(rank_mix), dtype=int)
    w = np.array([rank_mix[r] for r in ranks], dtype=float)
    if (w < 0).any() or w.sum() <= 0:
        raise AdapterConfigError(f"invalid rank mix {dict(rank_mix)!r}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(ranks, size=len(ids), p=w / w.sum())
    return [AdapterSpec.from_rank(aid, int(r), size_table) for aid, r in zip(ids, picks)]
