"""Online demand forecasting: per-adapter count series, replay buffer,
incremental training, and the oracle used as an upper bound."""
from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .lstm import Adam, LSTMConfig, LSTMModel, bce_loss

P_MIN, P_MAX = 1e-7, 1.0 - 1e-7


@dataclass(frozen=True)
class FeatureWindow:
    adapter_id: str
    counts: tuple[float, ...]
    interval_length: float = 1.0


@dataclass(frozen=True)
class TrainingExample:
    window: np.ndarray
    adapter_index: int
    label: int


@dataclass(frozen=True)
class Prediction:
    adapter_id: str
    probability: float
    issued_at: float


class ReplayBuffer:
    """Most recent ``capacity`` examples; the oldest one drops out first."""

    def __init__(self, capacity: int = 10_000):
        self.capacity = capacity
        self._items: deque[TrainingExample] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def add(self, ex: TrainingExample) -> None:
        if ex.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {ex.label}")
        self._items.append(ex)

    def sample(self, n: int, rng: np.random.Generator) -> list[TrainingExample]:
        size = len(self._items)
        if size == 0:
            return []
        pick = rng.choice(size, size=n, replace=size < n)
        return [self._items[i] for i in pick]


@dataclass
class PredictorConfig:
    window: int = 30
    interval_ms: float = 1000.0
    hidden: int = 64
    layers: int = 2
    embedding_dim: int = 8
    lr: float = 1e-3
    batch_size: int = 64
    train_every: int = 100
    replay_capacity: int = 10_000
    seed: int = 0


def forward(model: LSTMModel, window: FeatureWindow, adapter_index: int = 0,
            issued_at: float = 0.0) -> Prediction:
    """Single-window forecast."""
    if len(window.counts) != model.cfg.window:
        raise ValueError(f"window has {len(window.counts)} counts, model expects {model.cfg.window}")
    model.ensure_embeddings(adapter_index + 1)
    p = float(model.forward(np.array([window.counts]), np.array([adapter_index]))[0])
    return Prediction(window.adapter_id, min(max(p, P_MIN), P_MAX), issued_at)


def loss(predictions: Sequence[float], labels: Sequence[int]) -> float:
    return bce_loss(predictions, labels)


def train_step(model: LSTMModel, batch: Sequence[TrainingExample], opt: Adam) -> float | None:
    """One Adam update on ``batch``; returns the pre-update loss, or None for an empty batch."""
    if not batch:
        return None
    X = np.stack([ex.window for ex in batch])
    idx = np.array([ex.adapter_index for ex in batch])
    y = np.array([ex.label for ex in batch], dtype=float)
    model.ensure_embeddings(int(idx.max()) + 1)
    value, grads = model.loss_and_grads(X, idx, y)
    opt.step(model.params, grads)
    model.version += 1
    return value


class OnlinePredictor:
    """Tracks access counts per adapter and trains the LSTM as requests stream in.

    Counts accumulate per ``interval_ms`` interval. When an interval closes, every
    known adapter contributes one example: the window ending just before the
    interval, labelled by whether the adapter was accessed in it.
    """

    def __init__(self, cfg: PredictorConfig | None = None, model: LSTMModel | None = None):
        self.cfg = cfg = cfg or PredictorConfig()
        self.model = model or LSTMModel(LSTMConfig(cfg.hidden, cfg.layers, cfg.embedding_dim,
                                                   cfg.window, cfg.seed))
        self.opt = Adam(lr=cfg.lr)
        self.buffer = ReplayBuffer(cfg.replay_capacity)
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.ids: list[str] = []
        self.index: dict[str, int] = {}
        self._hist = np.zeros((0, cfg.window))   # raw counts, oldest first
        self._max = np.zeros(0)                  # running max of raw counts
        self._cur = np.zeros(0)                  # counts in the open interval
        self.interval = 0
        self.observed = 0
        self.train_steps = 0
        self.last_loss: float | None = None
        self._cache_key = None
        self._cache: dict[str, float] = {}

    @property
    def known_adapters(self) -> list[str]:
        return list(self.ids)

    def _register(self, adapter_id: str) -> int:
        i = self.index.get(adapter_id)
        if i is None:
            i = self.index[adapter_id] = len(self.ids)
            self.ids.append(adapter_id)
            w = self.cfg.window
            self._hist = np.vstack([self._hist, np.zeros((1, w))])
            self._max = np.append(self._max, 0.0)
            self._cur = np.append(self._cur, 0.0)
            self.model.ensure_embeddings(len(self.ids))
        return i

    def _normalized(self) -> np.ndarray:
        return self._hist / np.maximum(self._max, 1.0)[:, None]

    def advance(self, now_ms: float) -> None:
        """Close every interval that ended at or before ``now_ms``."""
        target = int(now_ms // self.cfg.interval_ms)
        while self.interval < target:
            if self.ids:
                windows = self._normalized()
                for i in range(len(self.ids)):
                    self.buffer.add(TrainingExample(windows[i], i, int(self._cur[i] > 0)))
                self._hist = np.roll(self._hist, -1, axis=1)
                self._hist[:, -1] = self._cur
                self._max = np.maximum(self._max, self._cur)
                self._cur = np.zeros_like(self._cur)
            self.interval += 1

    def observe(self, adapter_id: str, now_ms: float) -> None:
        self.advance(now_ms)
        i = self._register(adapter_id)
        self._cur[i] += 1
        self.observed += 1
        if self.observed % self.cfg.train_every == 0:
            self._train()

    def _train(self) -> None:
        batch = self.buffer.sample(self.cfg.batch_size, self.rng)
        value = train_step(self.model, batch, self.opt)
        if value is not None:
            self.train_steps += 1
            self.last_loss = value

    def window(self, adapter_id: str) -> FeatureWindow:
        i = self.index[adapter_id]
        return FeatureWindow(adapter_id, tuple(self._normalized()[i]),
                             self.cfg.interval_ms / 1000.0)

    def predict_all(self, now_ms: float) -> dict[str, float]:
        self.advance(now_ms)
        if not self.ids:
            return {}
        key = (self.interval, self.model.version, len(self.ids))
        if key != self._cache_key:
            p = self.model.forward(self._normalized(), np.arange(len(self.ids)))
            p = np.clip(p, P_MIN, P_MAX)
            self._cache = dict(zip(self.ids, p.tolist()))
            self._cache_key = key
        return dict(self._cache)

    def predictions(self, now_ms: float) -> list[Prediction]:
        return [Prediction(a, p, now_ms) for a, p in self.predict_all(now_ms).items()]


class OraclePredictor:
    """Knows the request stream: probability ~1 for adapters that will be
    requested within ``horizon_ms`` after ``now``, ~0 otherwise."""

    def __init__(self, arrivals: Iterable[tuple[float, str]], horizon_ms: float = 1000.0):
        times: dict[str, list[float]] = {}
        for t, a in arrivals:
            times.setdefault(a, []).append(t)
        self.times = {a: sorted(v) for a, v in times.items()}
        self.horizon_ms = horizon_ms
        self.train_steps = 0

    @property
    def known_adapters(self) -> list[str]:
        return list(self.times)

    def observe(self, adapter_id: str, now_ms: float) -> None:
        pass

    def predict_all(self, now_ms: float) -> dict[str, float]:
        out = {}
        hi = now_ms + self.horizon_ms
        for a, ts in self.times.items():
            j = bisect.bisect_right(ts, now_ms)
            out[a] = P_MAX if j < len(ts) and ts[j] <= hi else P_MIN
        return out


@dataclass
class AccuracyReport:
    accuracy: float = float("nan")
    pooled_accuracy: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    intervals: int = 0
    resident_hit_rate: float = float("nan")
    per_interval: list[float] = field(default_factory=list)


def evaluate_accuracy(predicted: dict[int, dict[str, float]], accessed: dict[int, set[str]],
                      first_seen: dict[str, float], theta: float, interval_ms: float = 1000.0,
                      warmup_ms: float = 0.0) -> AccuracyReport:
    """Score per-interval forecasts against what actually happened.

    An interval counts every adapter that was predicted hot, accessed in it, or
    accessed at any earlier time; never-seen adapters contribute no true negatives.
    """
    tp = fp = fn = correct = total = 0
    per = []
    for k in sorted(predicted):
        start = k * interval_ms
        if start < warmup_ms:
            continue
        preds = predicted[k]
        hot = {a for a, p in preds.items() if p > theta}
        act = accessed.get(k, set())
        universe = hot | act | {a for a, t in first_seen.items() if t < start}
        if not universe:
            continue
        ok = sum(1 for a in universe if (a in hot) == (a in act))
        per.append(ok / len(universe))
        correct += ok
        total += len(universe)
        tp += len(hot & act)
        fp += len(hot - act)
        fn += len(act - hot)
    rep = AccuracyReport(intervals=len(per), per_interval=per)
    if per:
        rep.accuracy = float(np.mean(per))
        rep.pooled_accuracy = correct / total
    if tp + fp:
        rep.precision = tp / (tp + fp)
    if tp + fn:
        rep.recall = tp / (tp + fn)
    return rep
