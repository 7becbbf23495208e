"""Deterministic discrete-event simulation of multi-adapter serving.

One event queue drives everything: arrivals, PCIe transfer milestones, batch
iterations, prediction rounds, compaction and metric ticks. Ties are broken by
insertion order.
"""
from __future__ import annotations

import bisect
import csv
import heapq
import io
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import AdapterSpec, MiB
from .memory import DEFAULT_PAGE_SIZE, BlockArena, OutOfMemory, PagePool
from .predictor import OnlinePredictor, OraclePredictor, PredictorConfig, evaluate_accuracy
from .prefetch import (AdmissionFailure, PrefetchPolicy, ResidencyState, Status, evict_until,
                       promote_staged, score_all, select_prefetch)
from .workload import Request

SCHEMA_VERSION = 1

ARRIVAL = "request_arrival"
TRANSFER = "transfer_complete"
BATCH = "batch_complete"
ROUND = "prediction_round"
COMPACTION = "compaction"
TICK = "metrics_tick"

POLICIES = ("reactive", "predictive", "oracle")
ALLOCATORS = ("paged", "block")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    pcie_bandwidth: float = 4e9            # bytes/s, split equally among active transfers
    transfer_base_latency_ms: float = 2.0
    prefill_base_ms: float = 5.0
    prefill_per_token_ms: float = 0.1
    decode_base_ms: float = 30.0
    decode_occupancy_factor: float = 0.5   # decode step = base * (1 + factor * running / slots)
    predictor_overhead_ms: float = 2.3
    page_table_overhead_ms: float = 0.4
    prefetch_sched_overhead_ms: float = 0.8
    compaction_ms_per_page: float = 0.05   # per 2 MiB moved

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0 and not (k == "decode_occupancy_factor" and v == 0):
                raise ConfigError(f"cost_model.{k} must be positive, got {v}")

    def prefill_ms(self, input_tokens: int) -> float:
        return self.prefill_base_ms + self.prefill_per_token_ms * input_tokens

    def decode_ms(self, running: int, slots: int) -> float:
        return self.decode_base_ms * (1.0 + self.decode_occupancy_factor * running / slots)

    def transfer_ms(self, nbytes: int, sharers: int = 1) -> float:
        """Closed-form latency of a transfer that shares the link with ``sharers - 1`` peers throughout."""
        return self.transfer_base_latency_ms + nbytes * sharers / self.pcie_bandwidth * 1000.0


@dataclass(frozen=True)
class SimConfig:
    policy: str = "predictive"
    prefetch: bool = True
    allocator: str = "paged"
    pool_bytes: int = 1024 * MiB
    page_size: int = DEFAULT_PAGE_SIZE
    prefetch_policy: PrefetchPolicy = field(default_factory=PrefetchPolicy)
    cost: CostModel = field(default_factory=CostModel)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    batch_slots: int = 32
    prediction_interval_ms: float = 100.0
    oracle_horizon_ms: float = 1000.0
    metrics_interval_ms: float = 1000.0
    compaction: str = "idle"               # idle | never
    demand_loads: str = "auto"             # sync | async | auto (async iff a staging area exists)
    compaction_threshold: float = 0.25
    duration_ms: float | None = None       # stop at this simulated time; None runs to completion
    warmup_ms: float = 0.0                 # excluded from accuracy and hit-rate figures
    seed: int = 0
    verbose: bool = False
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.allocator not in ALLOCATORS:
            raise ConfigError(f"allocator must be one of {ALLOCATORS}, got {self.allocator!r}")
        if self.compaction not in ("idle", "never"):
            raise ConfigError(f"compaction must be 'idle' or 'never', got {self.compaction!r}")
        if self.demand_loads not in ("auto", "sync", "async"):
            raise ConfigError(f"demand_loads must be auto, sync or async, got {self.demand_loads!r}")
        if self.batch_slots < 1:
            raise ConfigError("batch_slots must be >= 1")
        if self.pool_bytes < self.page_size:
            raise ConfigError("pool_bytes must hold at least one page")
        if self.prediction_interval_ms <= 0 or self.metrics_interval_ms <= 0:
            raise ConfigError("event intervals must be positive")

    @property
    def uses_predictor(self) -> bool:
        return self.policy != "reactive"

    @property
    def sync_loads(self) -> bool:
        """Without a staging area a demand load is copied straight into the active
        pool and the next iteration waits for it."""
        if self.demand_loads == "auto":
            return not (self.uses_predictor and self.prefetch)
        return self.demand_loads == "sync"

    @property
    def eviction_policy(self) -> PrefetchPolicy:
        if self.policy == "reactive":
            return replace(self.prefetch_policy, alpha=1.0, beta=0.0, gamma=0.0)
        return self.prefetch_policy


@dataclass
class RequestOutcome:
    request: Request
    ttft: float
    tpot: float
    cold_start: bool
    cold_start_latency: float
    queue_delay: float
    prefill: float
    finish_ms: float


@dataclass
class _Pending:
    req: Request
    cold: bool
    ready_ms: float | None
    first_token_ms: float = 0.0
    prefill_start_ms: float = 0.0
    prefill_ms: float = 0.0
    tokens: int = 0


@dataclass
class _Transfer:
    adapter_id: str
    remaining: float          # bytes
    demand: bool
    setup_end: float
    started: float
    rate: float = 0.0         # bytes per ms


class _Link:
    """Processor-shared PCIe link. Demand transfers preempt prefetch bandwidth."""

    def __init__(self, bandwidth_bps: float, base_latency_ms: float):
        self.bw = bandwidth_bps / 1000.0
        self.base = base_latency_ms
        self.active: dict[str, _Transfer] = {}
        self.last = 0.0
        self.version = 0

    def settle(self, now: float) -> None:
        dt = now - self.last
        if dt > 0:
            for t in self.active.values():
                if t.rate:
                    t.remaining -= t.rate * dt
        self.last = now

    def _rates(self, now: float) -> None:
        flowing = [t for t in self.active.values() if t.setup_end <= now]
        demand = [t for t in flowing if t.demand]
        share = demand or flowing
        for t in flowing:
            t.rate = self.bw / len(share) if t in share else 0.0
        for t in self.active.values():
            if t.setup_end > now:
                t.rate = 0.0

    def start(self, now: float, adapter_id: str, nbytes: int, demand: bool) -> None:
        self.settle(now)
        self.active[adapter_id] = _Transfer(adapter_id, float(nbytes), demand, now + self.base, now)

    def upgrade(self, now: float, adapter_id: str) -> None:
        self.settle(now)
        self.active[adapter_id].demand = True

    def finished(self, now: float) -> list[_Transfer]:
        done = [t for t in self.active.values()
                if t.setup_end <= now and t.remaining <= 1e-6 * max(1.0, t.rate)]
        for t in done:
            del self.active[t.adapter_id]
        return done

    def next_milestone(self, now: float) -> float | None:
        self._rates(now)
        best = None
        for t in self.active.values():
            if t.setup_end > now:
                cand = t.setup_end
            elif t.rate > 0:
                cand = now + max(t.remaining, 0.0) / t.rate
            else:
                continue
            if best is None or cand < best:
                best = cand
        return best


class _Memory:
    """Uniform view over the paged pool and the block arena for the engine."""

    def __init__(self, cfg: SimConfig):
        self.paged = cfg.allocator == "paged"
        self.page_size = cfg.page_size
        if self.paged:
            self.impl = PagePool.from_bytes(cfg.pool_bytes, cfg.page_size)
            self.staging_cap = int(cfg.prefetch_policy.staging_fraction * self.impl.total_pages)
        else:
            self.impl = BlockArena(cfg.pool_bytes)
            self.staging_cap = int(cfg.prefetch_policy.staging_fraction * cfg.pool_bytes)

    def units(self, nbytes: int) -> int:
        """Staging-budget units: pages for the paged pool, bytes for the arena."""
        return self.impl.pages_for(nbytes) if self.paged else nbytes

    @property
    def total_bytes(self) -> int:
        return self.impl.total_bytes

    def fits(self, nbytes: int) -> bool:
        return self.impl.fits(nbytes)

    def feasible_after(self, released, nbytes: int) -> bool:
        return self.impl.feasible_after(released, nbytes)

    def alloc(self, aid: str, nbytes: int) -> None:
        self.impl.alloc(aid, nbytes)

    def free(self, aid: str) -> None:
        self.impl.free(aid)

    def needs_compaction(self, threshold: float) -> bool:
        if self.paged:
            n = len(self.impl.allocated)
            return n > 0 and self.impl.scatter() / n > threshold
        return self.impl.report().external_frag > threshold

    def compact(self) -> int:
        """Compacts and returns the number of page-equivalents moved."""
        if self.paged:
            return self.impl.compact()
        return math.ceil(self.impl.compact() / self.page_size)

    def report(self):
        return self.impl.report()


@dataclass
class SimResult:
    config: SimConfig
    outcomes: list[RequestOutcome]
    metrics: dict
    timeseries: list[tuple]
    decisions: list[tuple]


class Simulator:
    def __init__(self, cfg: SimConfig, catalog: Sequence[AdapterSpec] | dict[str, AdapterSpec],
                 requests: Sequence[Request]):
        self.cfg = cfg
        self.catalog = dict(catalog) if isinstance(catalog, dict) else {a.id: a for a in catalog}
        self.requests = list(requests)
        self._validate()
        self.policy = cfg.eviction_policy
        self.mem = _Memory(cfg)
        self.link = _Link(cfg.cost.pcie_bandwidth, cfg.cost.transfer_base_latency_ms)
        self.res = ResidencyState(self.policy)
        if cfg.policy == "predictive":
            pcfg = replace(cfg.predictor, seed=cfg.predictor.seed + cfg.seed)
            self.predictor = OnlinePredictor(pcfg)
        elif cfg.policy == "oracle":
            self.predictor = OraclePredictor(((r.arrival_time, r.adapter_id) for r in self.requests),
                                             cfg.oracle_horizon_ms)
        else:
            self.predictor = None
        self.prefetching = cfg.uses_predictor and cfg.prefetch

        self.now = 0.0
        self._events: list = []
        self._seq = 0
        self._next_arrival = 0
        self.queues: dict[str, deque[_Pending]] = {}
        self.in_flight: dict[str, int] = {}
        self._ready_heap: list[tuple[int, str]] = []
        self._needs_load: list[tuple[int, str]] = []     # sorted by oldest waiting request
        self._needs_load_key: dict[str, int] = {}
        self.running: list[_Pending] = []
        self._batch: tuple[list[_Pending], list[_Pending]] | None = None
        self.gpu_busy = False
        self._sync_wait: set[str] = set()
        self._skip_sync_wait = False
        self._stall_from = 0.0
        self.predictions: dict[str, float] = {}
        self._prefetch_pending = False
        self._stall_ms = 0.0
        self.outcomes: list[RequestOutcome] = []
        self.timeseries: list[tuple] = []
        self.decisions: list[tuple] = []
        self._round_snapshots: dict[int, dict[str, float]] = {}
        self.stats = dict(rounds=0, batches=0, compaction_ms=0.0, compactions=0, relocated_pages=0,
                          demand_loads=0, prefetches=0, prefetch_used=0, prefetch_wasted=0,
                          evictions=0, bytes_loaded=0, admission_failures=0, promotions=0,
                          hits=0, hits_counted=0, load_stall_ms=0.0, frag_events=0)
        self._prefetched_unused: set[str] = set()
        self._last_event_time = 0.0

    def _validate(self) -> None:
        missing = sorted({r.adapter_id for r in self.requests} - self.catalog.keys())
        if missing:
            raise ConfigError(f"requests reference adapters missing from the catalog: {missing[:5]}")
        if self.catalog:
            biggest = max(self.catalog.values(), key=lambda a: a.weight_bytes)
            usable = (self.cfg.pool_bytes // self.cfg.page_size * self.cfg.page_size
                      if self.cfg.allocator == "paged" else self.cfg.pool_bytes)
            if biggest.weight_bytes > usable:
                raise ConfigError(
                    f"pool of {self.cfg.pool_bytes} bytes cannot hold adapter {biggest.id!r} "
                    f"({biggest.weight_bytes} bytes)")

    # -- event plumbing -----------------------------------------------------

    def _push(self, time: float, kind: str, payload=None) -> None:
        heapq.heappush(self._events, (time, self._seq, kind, payload))
        self._seq += 1

    def _log(self, action: str, aid: str, score: float | None = None) -> None:
        if self.cfg.verbose:
            p = self.res[aid].prediction
            self.decisions.append((self.now, action, aid,
                                   "" if score is None else score, p))

    def run(self) -> SimResult:
        cfg = self.cfg
        if self.requests:
            self._push(self.requests[0].arrival_time, ARRIVAL)
        if self.predictor is not None:
            self._push(0.0, ROUND, 0)
        self._push(0.0, TICK, 0)
        horizon = cfg.duration_ms
        while self._events:
            time, _, kind, payload = self._events[0]
            if horizon is not None and time > horizon:
                break
            if self._finished() and kind in (ROUND, TICK):
                break
            heapq.heappop(self._events)
            assert time >= self.now, "event time went backwards"
            self.now = time
            self._last_event_time = time
            getattr(self, "_on_" + kind)(payload)
        end = horizon if horizon is not None else self._last_event_time
        return SimResult(cfg, self.outcomes, self._metrics(end), self.timeseries, self.decisions)

    def _finished(self) -> bool:
        return (self._next_arrival >= len(self.requests) and not self.running
                and not self.gpu_busy and not any(self.queues.values()))

    # -- arrivals -----------------------------------------------------------

    def _on_request_arrival(self, _payload) -> None:
        req = self.requests[self._next_arrival]
        self._next_arrival += 1
        if self._next_arrival < len(self.requests):
            self._push(self.requests[self._next_arrival].arrival_time, ARRIVAL)
        self.handle_arrival(req)

    def handle_arrival(self, req: Request) -> None:
        aid = req.adapter_id
        st = self.res[aid]
        self.res.record_access(aid, self.now)
        if self.predictor is not None:
            self.predictor.observe(aid, self.now)
        warm = st.status is Status.RESIDENT or (st.status is Status.STAGING and st.transfer_done)
        if req.arrival_time >= self.cfg.warmup_ms:
            self.stats["hits_counted"] += 1
            self.stats["hits"] += warm
        if aid in self._prefetched_unused:
            self._prefetched_unused.discard(aid)
            self.stats["prefetch_used"] += 1
        pend = _Pending(req, cold=not warm, ready_ms=self.now if warm else None)
        q = self.queues.setdefault(aid, deque())
        q.append(pend)
        if st.status is Status.RESIDENT:
            if len(q) == 1:
                heapq.heappush(self._ready_heap, (req.request_id, aid))
        elif st.status is Status.STAGING and not st.transfer_done:
            self.link.upgrade(self.now, aid)
            self._reschedule_link()
        elif st.status is Status.NOT_RESIDENT:
            self._mark_needs_load(aid)
            self._pump_loads()
        if not self.gpu_busy:
            self._boundary()

    # -- loading and eviction ------------------------------------------------

    def _mark_needs_load(self, aid: str) -> None:
        if aid in self._needs_load_key:
            return
        key = self.queues[aid][0].req.request_id
        self._needs_load_key[aid] = key
        bisect.insort(self._needs_load, (key, aid))

    def _victims(self, requester_key: int | None = None) -> list[str]:
        out = []
        for aid, st in self.res.adapters.items():
            if st.status is not Status.RESIDENT or self.in_flight.get(aid):
                continue
            q = self.queues.get(aid)
            if q and (requester_key is None or q[0].req.request_id < requester_key):
                continue
            out.append(aid)
        return out

    def _release(self, aid: str) -> None:
        assert not self.in_flight.get(aid), f"evicting {aid} with requests in flight"
        score = score_all(self.res, [aid], self.now, self.policy)[aid]
        self.mem.free(aid)
        self.res[aid].status = Status.NOT_RESIDENT
        self.res[aid].transfer_done = False
        self.stats["evictions"] += 1
        if aid in self._prefetched_unused:
            self._prefetched_unused.discard(aid)
            self.stats["prefetch_wasted"] += 1
        self._log("evict", aid, score)
        if self.queues.get(aid):
            for p in self.queues[aid]:
                p.tokens = 0
            self._mark_needs_load(aid)

    def _make_room(self, nbytes: int, victims: list[str]) -> bool:
        if not self.mem.fits(nbytes) and self.mem.impl.free_bytes >= nbytes:
            self.stats["frag_events"] += 1
        try:
            evict_until(self.mem, nbytes, self.res, victims, self.now, self.policy,
                        release=self._release)
            return True
        except AdmissionFailure:
            return False

    def _pump_loads(self) -> None:
        """Start demand loads in order of each adapter's oldest waiting request."""
        first = True
        while self._needs_load:
            key, aid = self._needs_load[0]
            nbytes = self.catalog[aid].weight_bytes
            ok = self._make_room(nbytes, self._victims())
            if not ok and first:
                # the globally oldest waiter may displace adapters only younger requests wait on
                ok = self._make_room(nbytes, self._victims(requester_key=key))
            if not ok:
                self.stats["admission_failures"] += 1
                return
            self._needs_load.pop(0)
            del self._needs_load_key[aid]
            self._start_transfer(aid, nbytes, demand=True)
            first = False

    def _start_transfer(self, aid: str, nbytes: int, demand: bool) -> None:
        try:
            self.mem.alloc(aid, nbytes)
        except OutOfMemory:  # pragma: no cover - guarded by _make_room
            raise AssertionError(f"allocation for {aid} failed after making room")
        st = self.res[aid]
        st.status = Status.LOADING if demand else Status.STAGING
        st.transfer_done = False
        if not demand and aid in self._needs_load_key:
            # requests already wait on it: the prefetch runs at demand priority
            self._needs_load.remove((self._needs_load_key.pop(aid), aid))
            demand = True
        self.link.start(self.now, aid, nbytes, demand)
        self.stats["demand_loads" if demand else "prefetches"] += 1
        self.stats["bytes_loaded"] += nbytes
        self._log("demand_load" if demand else "prefetch", aid)
        self._reschedule_link()

    def _reschedule_link(self) -> None:
        self.link.version += 1
        t = self.link.next_milestone(self.now)
        if t is not None:
            self._push(t, TRANSFER, self.link.version)

    def _on_transfer_complete(self, version) -> None:
        if version != self.link.version:
            return
        self.link.settle(self.now)
        done = self.link.finished(self.now)
        for t in done:
            aid = t.adapter_id
            st = self.res[aid]
            st.transfer_done = True
            if st.status is Status.LOADING:
                st.status = Status.RESIDENT
            else:
                self._prefetched_unused.add(aid)
            q = self.queues.get(aid)
            if q:
                for p in q:
                    if p.ready_ms is None:
                        p.ready_ms = self.now
                if st.status is Status.RESIDENT:
                    heapq.heappush(self._ready_heap, (q[0].req.request_id, aid))
        self._reschedule_link()
        if self._sync_wait:
            self._sync_wait -= {t.adapter_id for t in done}
            if not self._sync_wait:
                self.stats["load_stall_ms"] += self.now - self._stall_from
                self.gpu_busy = False
                self._skip_sync_wait = True
        if not self.gpu_busy:
            self._boundary()

    # -- prediction and prefetch -----------------------------------------------

    def _on_prediction_round(self, k) -> None:
        cfg, cost = self.cfg, self.cfg.cost
        self._push((k + 1) * cfg.prediction_interval_ms, ROUND, k + 1)
        preds = self.predictor.predict_all(self.now)
        self.predictions = preds
        for aid, p in preds.items():
            self.res[aid].prediction = p
        interval = int(self.now // cfg.predictor.interval_ms)
        if interval not in self._round_snapshots:
            self._round_snapshots[interval] = dict(preds)
        self.stats["rounds"] += 1
        # the predictor runs off the critical path; the other two stall the next batch
        if self.prefetching:
            self._stall_ms += cost.prefetch_sched_overhead_ms
            self._prefetch_pending = True
        if self.mem.paged:
            self._stall_ms += cost.page_table_overhead_ms
        if not self.gpu_busy:
            self._boundary()

    def _staging_used(self) -> int:
        return sum(self.mem.units(self.catalog[a].weight_bytes)
                   for a in self.res.with_status(Status.STAGING))

    def _prefetch_pass(self) -> None:
        theta = self.policy.theta
        free_units = self.mem.staging_cap - self._staging_used()
        preds = {a: p for a, p in self.predictions.items() if a in self.catalog}
        picks = select_prefetch(preds, self.res, self.policy, free_units,
                                lambda a: self.mem.units(self.catalog[a].weight_bytes))
        for aid in picks:
            nbytes = self.catalog[aid].weight_bytes
            p = preds[aid]
            victims = [v for v in self._victims()
                       if self.res[v].prediction <= theta and self.res[v].prediction < p]
            if self._make_room(nbytes, victims):
                self._start_transfer(aid, nbytes, demand=False)

    # -- batching -------------------------------------------------------------

    def _admit(self) -> list[_Pending]:
        new = []
        free = self.cfg.batch_slots - len(self.running)
        while free > 0 and self._ready_heap:
            key, aid = heapq.heappop(self._ready_heap)
            q = self.queues.get(aid)
            if (not q or q[0].req.request_id != key
                    or self.res[aid].status is not Status.RESIDENT):
                continue
            pend = q.popleft()
            if q:
                heapq.heappush(self._ready_heap, (q[0].req.request_id, aid))
            self.in_flight[aid] = self.in_flight.get(aid, 0) + 1
            new.append(pend)
            free -= 1
        return new

    def _boundary(self) -> None:
        """Between iterations: promote staged adapters, prefetch, load, admit, start the next batch."""
        assert not self.gpu_busy
        promoted = promote_staged(self.res, self.res.with_status(Status.STAGING))
        for aid in promoted:
            self.stats["promotions"] += 1
            self._log("promote", aid)
            q = self.queues.get(aid)
            if q:
                heapq.heappush(self._ready_heap, (q[0].req.request_id, aid))
        if self._prefetch_pending:
            self._prefetch_pending = False
            self._prefetch_pass()
        self._pump_loads()
        if self.cfg.sync_loads and not self._skip_sync_wait:
            pending = {a for a, t in self.link.active.items() if t.demand}
            if pending:
                self._sync_wait = pending
                self._stall_from = self.now
                self.gpu_busy = True
                return
        self._skip_sync_wait = False
        new = self._admit()
        decode = list(self.running)
        if not new and not decode:
            self._stall_ms = 0.0
            self._maybe_compact()
            return
        cost = self.cfg.cost
        t = self.now + self._stall_ms
        self._stall_ms = 0.0
        for p in new:
            p.prefill_start_ms = t
            p.prefill_ms = cost.prefill_ms(p.req.input_tokens)
            t += p.prefill_ms
            p.first_token_ms = t
        if decode:
            t += cost.decode_ms(len(decode), self.cfg.batch_slots)
        self.running.extend(new)
        self._batch = (decode, new)
        self.gpu_busy = True
        self.stats["batches"] += 1
        self._push(t, BATCH)

    def _on_batch_complete(self, _payload) -> None:
        decode, new = self._batch
        self._batch = None
        self.gpu_busy = False
        for p in decode:
            p.tokens += 1
        for p in new:
            p.tokens = 1
        still = []
        for p in self.running:
            if p.tokens >= p.req.output_tokens:
                self._complete(p)
            else:
                still.append(p)
        self.running = still
        self._boundary()

    def _complete(self, p: _Pending) -> None:
        aid = p.req.adapter_id
        self.in_flight[aid] -= 1
        finish = p.first_token_ms if p.req.output_tokens == 1 else self.now
        arrival = p.req.arrival_time
        cold_lat = p.ready_ms - arrival if p.cold else 0.0
        tpot = (finish - p.first_token_ms) / (p.req.output_tokens - 1) if p.req.output_tokens > 1 else 0.0
        self.outcomes.append(RequestOutcome(
            p.req, ttft=p.first_token_ms - arrival, tpot=tpot, cold_start=p.cold,
            cold_start_latency=cold_lat, queue_delay=p.prefill_start_ms - p.ready_ms,
            prefill=p.prefill_ms, finish_ms=finish))

    def _maybe_compact(self) -> None:
        if (self.cfg.compaction != "idle" or self.link.active or any(self.queues.values())
                or not self.mem.needs_compaction(self.cfg.compaction_threshold)):
            return
        moved = self.mem.compact()
        if not moved:
            return
        ms = moved * self.cfg.cost.compaction_ms_per_page * (self.mem.page_size / (2 * MiB))
        self.stats["compactions"] += 1
        self.stats["relocated_pages"] += moved
        self.stats["compaction_ms"] += ms
        self.gpu_busy = True
        self._push(self.now + ms, COMPACTION)

    def _on_compaction(self, _payload) -> None:
        self.gpu_busy = False
        self._boundary()

    # -- metrics ---------------------------------------------------------------

    def _on_metrics_tick(self, k) -> None:
        rep = self.mem.report()
        self.timeseries.append((self.now, rep.utilization, rep.external_frag, rep.internal_frag))
        self._push((k + 1) * self.cfg.metrics_interval_ms, TICK, k + 1)

    def _accuracy(self) -> dict | None:
        if self.predictor is None:
            return None
        ims = self.cfg.predictor.interval_ms
        accessed: dict[int, set[str]] = {}
        first_seen: dict[str, float] = {}
        for r in self.requests:
            accessed.setdefault(int(r.arrival_time // ims), set()).add(r.adapter_id)
            first_seen.setdefault(r.adapter_id, r.arrival_time)
        last = int(self.now // ims)
        snaps = {k: v for k, v in self._round_snapshots.items() if k < last}
        rep = evaluate_accuracy(snaps, accessed, first_seen, self.policy.theta, ims,
                                self.cfg.warmup_ms)
        return {"accuracy": rep.accuracy, "pooled_accuracy": rep.pooled_accuracy,
                "precision": rep.precision, "recall": rep.recall, "intervals": rep.intervals}

    def _metrics(self, end_ms: float) -> dict:
        outs = self.outcomes
        s = self.stats
        ttft = np.array([o.ttft for o in outs])
        cold = np.array([o.cold_start_latency for o in outs if o.cold_start])
        steady = [row for row in self.timeseries if row[0] >= self.cfg.warmup_ms]
        util = np.array([row[1] for row in steady])
        ext = np.array([row[2] for row in steady])
        internal = np.array([row[3] for row in steady])
        duration_s = end_ms / 1000.0
        cost = self.cfg.cost
        # per-round charges as count x unit so the totals are exact multiples
        units = {"predictor": cost.predictor_overhead_ms,
                 "prefetch_scheduler": cost.prefetch_sched_overhead_ms if self.prefetching else 0.0,
                 "page_table": cost.page_table_overhead_ms if self.mem.paged else 0.0}
        per_round = math.fsum(units.values()) if s["rounds"] else None

        def stat(a, f):
            return float(f(a)) if len(a) else None

        acc = self._accuracy()
        hit_rate = s["hits"] / s["hits_counted"] if s["hits_counted"] else None
        if acc is not None:
            acc["resident_hit_rate"] = hit_rate
        return _clean({
            "schema_version": SCHEMA_VERSION,
            "policy": self.cfg.policy, "prefetch": self.prefetching,
            "allocator": self.cfg.allocator, "seed": self.cfg.seed, "tags": list(self.cfg.tags),
            "duration_s": duration_s,
            "requests_total": len(self.requests),
            "completed": len(outs),
            "incomplete": len(self.requests) - len(outs),
            "throughput_rps": len(outs) / duration_s if duration_s > 0 else 0.0,
            "ttft_ms": {"mean": stat(ttft, np.mean), "p50": stat(ttft, np.median),
                        "p99": stat(ttft, lambda a: np.percentile(a, 99))},
            "tpot_ms": {"mean": stat(np.array([o.tpot for o in outs if o.request.output_tokens > 1]), np.mean)},
            "queue_ms": {"mean": stat(np.array([o.queue_delay for o in outs]), np.mean)},
            "cold_start": {
                "count": int(len(cold)),
                "fraction": len(cold) / len(outs) if outs else None,
                "latency_ms": {"mean": stat(cold, np.mean), "p50": stat(cold, np.median),
                               "p90": stat(cold, lambda a: np.percentile(a, 90)),
                               "p99": stat(cold, lambda a: np.percentile(a, 99))},
                "mean_per_request_ms": stat(np.array([o.cold_start_latency for o in outs]), np.mean),
            },
            "resident_hit_rate": hit_rate,
            "memory": {"utilization_mean": stat(util, np.mean), "utilization_min": stat(util, np.min),
                       "external_frag_mean": stat(ext, np.mean),
                       "internal_frag_mean": stat(internal, np.mean),
                       "frag_events": s["frag_events"]},
            "prediction": acc,
            "overhead_ms": {**{k: u * s["rounds"] for k, u in units.items()},
                            "compaction": s["compaction_ms"], "load_stall": s["load_stall_ms"],
                            "rounds": s["rounds"], "batches": s["batches"],
                            "per_round": per_round},
            "latency_breakdown_ms": {
                "adapter_load": stat(np.array([o.cold_start_latency for o in outs]), np.mean),
                "queue": stat(np.array([o.queue_delay for o in outs]), np.mean),
                "prefill": stat(np.array([o.prefill for o in outs]), np.mean),
                "decode": stat(np.array([o.finish_ms - o.request.arrival_time - o.ttft for o in outs]), np.mean)},
            "transfers": {k: s[k] for k in ("demand_loads", "prefetches", "prefetch_used",
                                            "prefetch_wasted", "evictions", "bytes_loaded",
                                            "promotions", "compactions", "relocated_pages")},
            "admission_failures": s["admission_failures"],
            "train_steps": getattr(self.predictor, "train_steps", 0),
        })


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if math.isnan(x) else x
    if isinstance(x, np.integer):
        return int(x)
    return x


def run(cfg: SimConfig, catalog, requests: Sequence[Request]) -> SimResult:
    return Simulator(cfg, catalog, requests).run()


# -- output files ----------------------------------------------------------------

REQUEST_CSV_HEADER = ["request_id", "arrival_ms", "adapter_id", "cold_start", "ttft_ms", "tpot_ms", "queue_ms"]
TIMESERIES_HEADER = ["time_ms", "utilization", "external_frag", "internal_frag"]
DECISION_HEADER = ["time_ms", "action", "adapter_id", "score", "probability"]


def _fmt(x) -> str:
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def requests_csv(result: SimResult) -> str:
    rows = sorted(((o.request.request_id, o.request.arrival_time, o.request.adapter_id,
                    int(o.cold_start), o.ttft, o.tpot, o.queue_delay) for o in result.outcomes))
    return _csv(REQUEST_CSV_HEADER, rows)


def metrics_json(result: SimResult) -> str:
    return json.dumps(result.metrics, indent=2, sort_keys=True) + "\n"


def write_outputs(result: SimResult, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "metrics": (out / "metrics.json", metrics_json(result)),
        "requests": (out / "requests.csv", requests_csv(result)),
        "timeseries": (out / "timeseries.csv", _csv(TIMESERIES_HEADER, result.timeseries)),
        "decisions": (out / "decisions.csv", _csv(DECISION_HEADER, result.decisions)),
    }
    for path, text in files.values():
        path.write_text(text)
    return {k: v[0] for k, v in files.items()}


def read_requests_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and list(rows[0]) != REQUEST_CSV_HEADER:
        raise ValueError(f"{path}: unexpected header")
    return [{"request_id": int(r["request_id"]), "arrival_ms": float(r["arrival_ms"]),
             "adapter_id": r["adapter_id"], "cold_start": bool(int(r["cold_start"])),
             "ttft_ms": float(r["ttft_ms"]), "tpot_ms": float(r["tpot_ms"]),
             "queue_ms": float(r["queue_ms"])} for r in rows]


def read_timeseries_csv(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def read_metrics(path: str | Path) -> dict:
    m = json.loads(Path(path).read_text())
    if m.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported metrics schema {m.get('schema_version')!r}")
    return m


# -- policy comparison -------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    name: str
    policy: str
    prefetch: bool
    allocator: str

    def apply(self, cfg: SimConfig) -> SimConfig:
        return replace(cfg, policy=self.policy, prefetch=self.prefetch, allocator=self.allocator,
                       tags=(self.name,))


ABLATION = (
    Cell("baseline", "reactive", False, "block"),
    Cell("+prediction", "predictive", False, "block"),
    Cell("+prefetch", "predictive", True, "block"),
    Cell("+paging", "predictive", True, "paged"),
)


def frag_cells(policy: str = "predictive", prefetch: bool = True) -> tuple[Cell, ...]:
    return (Cell("paged", policy, prefetch, "paged"), Cell("block", policy, prefetch, "block"))


def parse_cell(spec: str) -> Cell:
    """``policy/allocator`` with an optional ``/noprefetch`` suffix, e.g. ``oracle/paged``."""
    parts = spec.strip().split("/")
    if len(parts) not in (2, 3) or parts[0] not in POLICIES or parts[1] not in ALLOCATORS:
        raise ConfigError(f"unknown cell {spec!r}; expected policy/allocator[/noprefetch] "
                          f"with policy in {POLICIES} and allocator in {ALLOCATORS}")
    if len(parts) == 3 and parts[2] != "noprefetch":
        raise ConfigError(f"unknown cell option {parts[2]!r} in {spec!r}")
    return Cell(spec.strip(), parts[0], len(parts) == 2, parts[1])


def paired_cold_start(base: SimResult, other: SimResult, since_ms: float = 0.0) -> dict:
    """Cold-start latency that ``other`` leaves on the requests that were cold under ``base``.

    Warm requests count as zero, so a policy that turns a cold request warm removes
    its whole penalty.
    """
    cold_ids = [o.request.request_id for o in base.outcomes
                if o.cold_start and o.request.arrival_time >= since_ms]
    lat_b = {o.request.request_id: o.cold_start_latency for o in base.outcomes}
    lat_o = {o.request.request_id: o.cold_start_latency for o in other.outcomes}
    ids = [i for i in cold_ids if i in lat_o]
    if not ids:
        return {"n": 0, "base_median": None, "median": None, "reduction": None}
    b = float(np.median([lat_b[i] for i in ids]))
    o = float(np.median([lat_o[i] for i in ids]))
    return {"n": len(ids), "base_median": b, "median": o,
            "reduction": 1.0 - o / b if b > 0 else None}


COMPARE_KEYS = (
    ("throughput_rps", ("throughput_rps",)),
    ("ttft_p50_ms", ("ttft_ms", "p50")),
    ("ttft_p99_ms", ("ttft_ms", "p99")),
    ("tpot_mean_ms", ("tpot_ms", "mean")),
    ("cold_starts", ("cold_start", "count")),
    ("cold_start_p50_ms", ("cold_start", "latency_ms", "p50")),
    ("resident_hit_rate", ("resident_hit_rate",)),
    ("utilization_mean", ("memory", "utilization_mean")),
    ("external_frag_mean", ("memory", "external_frag_mean")),
    ("accuracy", ("prediction", "accuracy")),
)


def _dig(m: dict, path):
    for k in path:
        if m is None:
            return None
        m = m.get(k)
    return m


@dataclass
class Comparison:
    cells: list[Cell]
    results: list[SimResult]

    def rows(self) -> list[dict]:
        base = self.results[0]
        out = []
        for cell, res in zip(self.cells, self.results):
            row = {"cell": cell.name, "policy": cell.policy, "prefetch": cell.prefetch,
                   "allocator": cell.allocator}
            for key, path in COMPARE_KEYS:
                v, b = _dig(res.metrics, path), _dig(base.metrics, path)
                row[key] = v
                row[key + "_delta"] = (v - b) / b if v is not None and b else None
            row["paired_cold_p50_ms"] = paired_cold_start(base, res, res.config.warmup_ms)["median"]
            out.append(row)
        return out

    def to_csv(self) -> str:
        rows = self.rows()
        header = list(rows[0])
        return _csv(header, [["" if r[k] is None else r[k] for k in header] for r in rows])

    def to_text(self) -> str:
        rows = self.rows()
        cols = ["cell"] + [k for k, _ in COMPARE_KEYS] + ["paired_cold_p50_ms"]
        table = [cols]
        for r in rows:
            line = [r["cell"]]
            for k in cols[1:]:
                v = r[k]
                d = r.get(k + "_delta")
                cell = "-" if v is None else (f"{v:.4g}" if isinstance(v, float) else str(v))
                if d is not None and r is not rows[0]:
                    cell += f" ({d:+.1%})"
                line.append(cell)
            table.append(line)
        widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in table) + "\n"


def compare_policies(cfg: SimConfig, catalog, requests: Sequence[Request],
                     cells: Sequence[Cell]) -> Comparison:
    """One run per cell on the same workload and seed; deltas are relative to the first cell."""
    if len(cells) < 2:
        raise ConfigError("a comparison needs at least two cells")
    results = [run(c.apply(cfg), catalog, requests) for c in cells]
    return Comparison(list(cells), results)
