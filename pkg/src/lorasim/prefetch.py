"""Prefetch selection, staging promotion and score-based eviction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence


class Status(str, Enum):
    NOT_RESIDENT = "not_resident"
    LOADING = "loading"      # demand load in flight, lands directly in the active pool
    STAGING = "staging"      # prefetch in flight or landed, awaiting promotion
    RESIDENT = "resident"


class AdmissionFailure(Exception):
    """Eviction of every eligible adapter would still not make room."""


@dataclass(frozen=True)
class PrefetchPolicy:
    theta: float = 0.5
    alpha: float = 0.3
    beta: float = 0.3
    gamma: float = 0.4
    tau_s: float = 60.0
    freq_half_life_s: float = 120.0
    staging_fraction: float = 0.10

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        if min(self.alpha, self.beta, self.gamma) < 0 or self.alpha + self.beta + self.gamma <= 0:
            raise ValueError("eviction weights must be nonnegative with a positive sum")
        if self.tau_s <= 0 or self.freq_half_life_s <= 0:
            raise ValueError("tau_s and freq_half_life_s must be positive")
        if not 0.0 <= self.staging_fraction <= 1.0:
            raise ValueError("staging_fraction must lie in [0, 1]")

    @classmethod
    def lru(cls, **kw) -> "PrefetchPolicy":
        return cls(alpha=1.0, beta=0.0, gamma=0.0, **kw)


@dataclass
class AdapterState:
    status: Status = Status.NOT_RESIDENT
    last_access_ms: float = -math.inf
    freq: float = 0.0
    freq_at_ms: float = 0.0
    prediction: float = 0.0
    transfer_done: bool = False

    def decayed_freq(self, now_ms: float, half_life_s: float) -> float:
        if self.freq == 0.0:
            return 0.0
        return self.freq * 2.0 ** (-(now_ms - self.freq_at_ms) / (half_life_s * 1000.0))

    def recency(self, now_ms: float, tau_s: float) -> float:
        if self.last_access_ms == -math.inf:
            return 0.0
        return math.exp(-(now_ms - self.last_access_ms) / (tau_s * 1000.0))


@dataclass
class ResidencyState:
    policy: PrefetchPolicy = field(default_factory=PrefetchPolicy)
    adapters: dict[str, AdapterState] = field(default_factory=dict)

    def __getitem__(self, adapter_id: str) -> AdapterState:
        st = self.adapters.get(adapter_id)
        if st is None:
            st = self.adapters[adapter_id] = AdapterState()
        return st

    def record_access(self, adapter_id: str, now_ms: float) -> None:
        st = self[adapter_id]
        st.freq = st.decayed_freq(now_ms, self.policy.freq_half_life_s) + 1.0
        st.freq_at_ms = now_ms
        st.last_access_ms = now_ms

    def with_status(self, *statuses: Status) -> list[str]:
        return [a for a, st in self.adapters.items() if st.status in statuses]


def select_prefetch(predictions: Mapping[str, float], residency: ResidencyState,
                    policy: PrefetchPolicy, staging_free_pages: int,
                    pages_of: Callable[[str], int]) -> list[str]:
    """Adapters to prefetch, highest probability first, cut at the first one
    that no longer fits into the staging budget."""
    cands = [(p, a) for a, p in predictions.items()
             if p > policy.theta and residency[a].status is Status.NOT_RESIDENT]
    cands.sort(key=lambda x: -x[0])  # stable: ties keep prediction order
    out = []
    budget = staging_free_pages
    for _, a in cands:
        need = pages_of(a)
        if need > budget:
            break
        budget -= need
        out.append(a)
    return out


def eviction_score(state: AdapterState, policy: PrefetchPolicy, now_ms: float,
                   freq_max: float) -> float:
    lru = state.recency(now_ms, policy.tau_s)
    f = state.decayed_freq(now_ms, policy.freq_half_life_s)
    freq = f / freq_max if freq_max > 0 else 0.0
    return policy.alpha * lru + policy.beta * freq + policy.gamma * state.prediction


def score_all(residency: ResidencyState, candidates: Iterable[str], now_ms: float,
              policy: PrefetchPolicy | None = None) -> dict[str, float]:
    policy = policy or residency.policy
    resident = residency.with_status(Status.RESIDENT)
    freq_max = max((residency[a].decayed_freq(now_ms, policy.freq_half_life_s)
                    for a in resident), default=0.0)
    return {a: eviction_score(residency[a], policy, now_ms, freq_max) for a in candidates}


def eviction_order(scores: Mapping[str, float]) -> list[str]:
    # ties broken by id so runs stay deterministic
    return sorted(scores, key=lambda a: (scores[a], a))


def evict_until(memory, bytes_needed: int, residency: ResidencyState,
                eligible: Sequence[str], now_ms: float,
                policy: PrefetchPolicy | None = None,
                release: Callable[[str], None] | None = None) -> list[str]:
    """Evict eligible adapters in ascending score until ``memory.fits(bytes_needed)``.

    ``eligible`` must already exclude busy adapters. Nothing is evicted when even
    evicting all of them would not be enough.
    """
    if memory.fits(bytes_needed):
        return []
    order = eviction_order(score_all(residency, eligible, now_ms, policy))
    if not memory.feasible_after(order, bytes_needed):
        raise AdmissionFailure(f"cannot free room for {bytes_needed} bytes")
    evicted = []
    for a in order:
        if release is not None:
            release(a)
        else:
            memory.free(a)
            residency[a].status = Status.NOT_RESIDENT
        evicted.append(a)
        if memory.fits(bytes_needed):
            return evicted
    raise AssertionError("feasibility check and eviction loop disagree")


def promote_staged(residency: ResidencyState, staged: Iterable[str]) -> list[str]:
    """Flip every staged adapter whose transfer landed to resident."""
    promoted = []
    for a in staged:
        st = residency[a]
        if st.status is Status.STAGING and st.transfer_done:
            st.status = Status.RESIDENT
            promoted.append(a)
    return promoted
