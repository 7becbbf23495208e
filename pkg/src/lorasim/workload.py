"""Request streams: replayed CSV traces or synthetic diurnal / hot-set patterns."""
from __future__ import annotations

import csv
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

TRACE_HEADER = ["timestamp_ms", "function_id", "input_tokens", "output_tokens"]


class TraceError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Request:
    request_id: int
    arrival_time: float  # ms since start of run
    adapter_id: str
    input_tokens: int
    output_tokens: int

    def __post_init__(self):
        if self.arrival_time < 0:
            raise ValueError(f"request {self.request_id}: negative arrival time")
        if self.input_tokens < 1 or self.output_tokens < 1:
            raise ValueError(f"request {self.request_id}: token counts must be >= 1")


@dataclass(frozen=True)
class LengthDistribution:
    """Token-length sampler. ``lognormal`` uses ``median`` and log-space ``sigma``."""
    family: str = "lognormal"
    median: float = 256.0
    sigma: float = 0.6
    max_tokens: int = 4096

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.family == "constant":
            x = np.full(n, self.median)
        elif self.family == "lognormal":
            x = rng.lognormal(np.log(self.median), self.sigma, size=n)
        else:
            raise ValueError(f"unknown length distribution {self.family!r}")
        return np.clip(np.rint(x), 1, self.max_tokens).astype(int)


DEFAULT_INPUT_LENGTHS = LengthDistribution(median=256)
DEFAULT_OUTPUT_LENGTHS = LengthDistribution(median=128)


@dataclass(frozen=True)
class SyntheticProfile:
    """Parameters of the synthetic generator.

    The hot set at rotation epoch ``e`` is ``{(e * rotation_step + j) % n : j < hot_set_size}``;
    it receives ``hot_share`` of requests, the remaining adapters share the rest.
    ``rotation_step`` defaults to ``hot_set_size`` (disjoint groups).
    """
    num_adapters: int = 20
    base_rate: float = 50.0
    diurnal_amplitude: float = 0.0
    period: float = 300.0
    hot_set_size: int = 4
    hot_set_rotation_period: float = 30.0
    hot_share: float = 0.9
    rotation_step: int | None = None
    rotation_phase: float = 0.0
    burstiness: float = 1.0
    input_lengths: LengthDistribution = field(default_factory=lambda: DEFAULT_INPUT_LENGTHS)
    output_lengths: LengthDistribution = field(default_factory=lambda: DEFAULT_OUTPUT_LENGTHS)
    id_prefix: str = "a"

    def __post_init__(self):
        if self.num_adapters < 1:
            raise ValueError("num_adapters must be >= 1")
        if not 0.0 <= self.diurnal_amplitude <= 1.0:
            raise ValueError("diurnal_amplitude must lie in [0, 1]")
        if not 1 <= self.hot_set_size <= self.num_adapters:
            raise ValueError("hot_set_size must lie in [1, num_adapters]")
        if not 0.0 <= self.hot_share <= 1.0:
            raise ValueError("hot_share must lie in [0, 1]")
        if self.base_rate <= 0 or self.period <= 0 or self.hot_set_rotation_period <= 0:
            raise ValueError("rates and periods must be positive")
        if self.burstiness <= 0:
            raise ValueError("burstiness (coefficient of variation) must be positive")

    def adapter_ids(self) -> list[str]:
        width = len(str(self.num_adapters - 1))
        return [f"{self.id_prefix}{i:0{width}d}" for i in range(self.num_adapters)]

    def hot_set(self, t_s: float) -> list[int]:
        step = self.rotation_step if self.rotation_step is not None else self.hot_set_size
        e = int(np.floor((t_s + self.rotation_phase) / self.hot_set_rotation_period))
        return [(e * step + j) % self.num_adapters for j in range(self.hot_set_size)]


def _arrival_times(profile: SyntheticProfile, duration_s: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Renewal process in operational time, mapped through the integrated rate.

    Gamma(k = 1/cv^2) gaps give the requested coefficient of variation (cv = 1 is Poisson).
    """
    A, T, lam = profile.diurnal_amplitude, profile.period, profile.base_rate
    grid = np.linspace(0.0, duration_s, max(int(duration_s * 1000), 2) + 1)
    cum = lam * (grid + A * T / (2 * np.pi) * (1.0 - np.cos(2 * np.pi * grid / T)))
    total = cum[-1]
    k = 1.0 / profile.burstiness ** 2
    n_guess = int(total + 10 * np.sqrt(total / k + 1) + 16)
    ops = np.cumsum(rng.gamma(k, 1.0 / k, size=n_guess))
    while ops[-1] < total:
        more = np.cumsum(rng.gamma(k, 1.0 / k, size=n_guess)) + ops[-1]
        ops = np.concatenate([ops, more])
    ops = ops[ops < total]
    return np.interp(ops, cum, grid)


def generate_synthetic(profile: SyntheticProfile, duration: float, seed: int = 0) -> list[Request]:
    """Deterministic synthetic stream of ``duration`` seconds."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    t = _arrival_times(profile, duration, rng)
    n = len(t)
    N, H = profile.num_adapters, profile.hot_set_size
    step = profile.rotation_step if profile.rotation_step is not None else H
    epochs = np.floor((t + profile.rotation_phase) / profile.hot_set_rotation_period).astype(np.int64)
    u = rng.random(n)
    j = rng.integers(0, 1 << 62, size=n)
    if H == N:
        choice = j % N
    else:
        hot = u < profile.hot_share
        base = epochs * step
        # hot: offset inside the hot run; cold: offset past it
        offset = np.where(hot, j % H, H + j % (N - H))
        choice = (base + offset) % N
    ids = profile.adapter_ids()
    ins = profile.input_lengths.sample(rng, n)
    outs = profile.output_lengths.sample(rng, n)
    return [Request(i, float(ms), ids[c], int(a), int(b))
            for i, (ms, c, a, b) in enumerate(zip(np.round(t * 1000.0, 6), choice, ins, outs))]


def map_function(function_id: str, rule: str, num_adapters: int | None = None,
                 top: dict[str, int] | None = None) -> str | None:
    if rule == "identity":
        return function_id
    if rule == "hash_mod":
        return f"a{zlib.crc32(function_id.encode()) % num_adapters}"
    if rule == "top_n":
        return f"a{top[function_id]}" if function_id in top else None
    raise TraceError(f"unknown mapping rule {rule!r}")


def ingest_trace(path: str | Path, mapping: str = "identity", rate_scale: float = 1.0,
                 num_adapters: int | None = None,
                 input_lengths: LengthDistribution = DEFAULT_INPUT_LENGTHS,
                 output_lengths: LengthDistribution = DEFAULT_OUTPUT_LENGTHS,
                 seed: int = 0) -> list[Request]:
    """Read a ``timestamp_ms,function_id[,input_tokens,output_tokens]`` CSV.

    Arrivals are rebased so the earliest is at 0, and every gap is divided by
    ``rate_scale``. ``mapping`` turns function ids into adapter ids: ``identity``
    (one adapter per function), ``hash_mod`` (crc32 modulo ``num_adapters``) or
    ``top_n`` (the ``num_adapters`` busiest functions; other rows are dropped).
    Missing token counts are drawn from the length distributions.
    """
    if rate_scale <= 0:
        raise TraceError("rate_scale must be positive")
    if mapping in ("hash_mod", "top_n") and not num_adapters:
        raise TraceError(f"mapping {mapping!r} needs num_adapters")
    path = Path(path)
    rows = []
    try:
        fh = path.open(newline="")
    except FileNotFoundError:
        raise TraceError(f"trace file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceError(f"{path}: empty trace")
        header = [h.strip() for h in header]
        if header[:2] != TRACE_HEADER[:2] or header != TRACE_HEADER[:len(header)]:
            raise TraceError(f"{path}:1: expected header {','.join(TRACE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) > len(header) or len(row) < 2:
                raise TraceError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                ts = float(row[0])
                fn = row[1].strip()
                toks = [int(c) if c.strip() else None for c in row[2:4]]
            except ValueError as e:
                raise TraceError(f"{path}:{lineno}: {e}") from None
            toks += [None] * (2 - len(toks))
            if not np.isfinite(ts) or ts < 0 or not fn:
                raise TraceError(f"{path}:{lineno}: invalid timestamp or function id")
            if any(t is not None and t < 1 for t in toks):
                raise TraceError(f"{path}:{lineno}: token counts must be >= 1")
            rows.append((ts, lineno, fn, toks[0], toks[1]))
    if not rows:
        raise TraceError(f"{path}: trace has no requests")
    rows.sort(key=lambda r: (r[0], r[1]))
    top = None
    if mapping == "top_n":
        freq = Counter(r[2] for r in rows)
        ranked = sorted(freq, key=lambda f: (-freq[f], f))[:num_adapters]
        top = {f: i for i, f in enumerate(ranked)}
    rng = np.random.default_rng(seed)
    ins = input_lengths.sample(rng, len(rows))
    outs = output_lengths.sample(rng, len(rows))
    t0 = rows[0][0]
    out = []
    for k, (ts, _, fn, a, b) in enumerate(rows):
        aid = map_function(fn, mapping, num_adapters, top)
        if aid is None:
            continue
        out.append(Request(len(out), round((ts - t0) / rate_scale, 6), aid,
                           a if a is not None else int(ins[k]),
                           b if b is not None else int(outs[k])))
    if not out:
        raise TraceError(f"{path}: no requests survived the {mapping!r} mapping")
    return out


def write_trace(requests: Sequence[Request], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in requests:
            w.writerow([f"{r.arrival_time:.3f}", r.adapter_id, r.input_tokens, r.output_tokens])


def per_adapter_counts(requests: Sequence[Request]) -> dict[str, int]:
    return dict(Counter(r.adapter_id for r in requests))
