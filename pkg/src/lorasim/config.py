"""Run configuration: a YAML file layered over the shipped defaults.

Keys are checked against ``data/defaults.yaml``; a key that is not there is an
error naming its dotted path, never silently ignored.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .adapters import AdapterConfigError, SizeTable, build_catalog, load_catalog
from .engine import ConfigError, CostModel, SimConfig
from .predictor import PredictorConfig
from .prefetch import PrefetchPolicy
from .workload import (LengthDistribution, Request, SyntheticProfile, TraceError,
                       generate_synthetic, ingest_trace)

DEMO_TRACE = "@demo"
# values replaced wholesale rather than merged key by key
FREE_FORM = {"catalog.rank_mix", "catalog.size_table"}


def data_path(name: str) -> Path:
    return Path(str(resources.files("lorasim") / "data" / name))


def load_defaults() -> dict:
    return yaml.safe_load(data_path("defaults.yaml").read_text())


def _check_type(key: str, default: Any, value: Any) -> None:
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")


def merge(base: dict, over: dict, prefix: str = "") -> dict:
    """Overlay ``over`` on ``base``; every key in ``over`` must exist in ``base``."""
    if not isinstance(over, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {over!r}")
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        d = base[k]
        if key in FREE_FORM or key == "workload.synthetic":
            out[k] = v
        elif isinstance(d, dict) and isinstance(v, dict):
            out[k] = merge(d, v, key + ".")
        else:
            _check_type(key, d, v)
            out[k] = v
    return out


def set_key(cfg: dict, dotted: str, value: Any) -> None:
    """Override one dotted key, with the same checks as a config file."""
    parts = dotted.split(".")
    over: dict = {}
    node = over
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    cfg.update(merge(cfg, over))


@dataclass
class RunConfig:
    data: dict
    base_dir: Path

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def output(self) -> Path:
        return self.base_dir / self.data["output"] if not Path(self.data["output"]).is_absolute() \
            else Path(self.data["output"])

    def sim_config(self) -> SimConfig:
        d = self.data
        pol, alloc, eng = d["policy"], d["allocator"], d["engine"]
        try:
            prefetch_policy = PrefetchPolicy(
                theta=pol["theta"], alpha=pol["alpha"], beta=pol["beta"], gamma=pol["gamma"],
                tau_s=pol["tau_s"], freq_half_life_s=pol["freq_half_life_s"],
                staging_fraction=pol["staging_fraction"])
        except ValueError as e:
            raise ConfigError(f"policy: {e}") from None
        cost = CostModel(**{k: float(v) for k, v in d["cost_model"].items()})
        duration = eng["duration_s"]
        return SimConfig(
            policy=pol["name"], prefetch=bool(pol["prefetch"]), allocator=alloc["kind"],
            pool_bytes=int(alloc["pool_bytes"]), page_size=int(alloc["page_size"]),
            prefetch_policy=prefetch_policy, cost=cost,
            predictor=PredictorConfig(**d["predictor"]),
            batch_slots=int(eng["batch_slots"]),
            prediction_interval_ms=float(eng["prediction_interval_ms"]),
            oracle_horizon_ms=float(pol["oracle_horizon_ms"]),
            metrics_interval_ms=float(eng["metrics_interval_ms"]),
            compaction=alloc["compaction"], compaction_threshold=float(alloc["compaction_threshold"]),
            duration_ms=None if duration is None else float(duration) * 1000.0,
            warmup_ms=float(eng["warmup_s"]) * 1000.0, demand_loads=eng["demand_loads"],
            seed=self.seed, verbose=bool(eng["verbose"]))

    def _lengths(self, key: str) -> LengthDistribution:
        try:
            return LengthDistribution(**self.data["workload"][key])
        except TypeError as e:
            raise ConfigError(f"workload.{key}: {e}") from None

    def synthetic_profile(self) -> tuple[SyntheticProfile, float]:
        w = self.data["workload"]
        params = merge(self.data["synthetic_defaults"], w["synthetic"], "workload.synthetic.")
        duration = float(params.pop("duration_s"))
        try:
            prof = SyntheticProfile(input_lengths=self._lengths("input_tokens"),
                                    output_lengths=self._lengths("output_tokens"), **params)
        except ValueError as e:
            raise ConfigError(f"workload.synthetic: {e}") from None
        return prof, duration

    def trace_path(self) -> Path:
        t = self.data["workload"]["trace"]
        if t == DEMO_TRACE:
            return data_path("demo_trace.csv")
        p = Path(t)
        return p if p.is_absolute() else self.base_dir / p

    def requests(self) -> list[Request]:
        w = self.data["workload"]
        if (w["trace"] is None) == (w["synthetic"] is None):
            raise ConfigError("workload: set exactly one of 'trace' and 'synthetic'")
        if w["synthetic"] is not None:
            prof, duration = self.synthetic_profile()
            return generate_synthetic(prof, duration, self.seed)
        try:
            return ingest_trace(self.trace_path(), w["mapping"], float(w["rate_scale"]),
                                w["num_adapters"], self._lengths("input_tokens"),
                                self._lengths("output_tokens"), self.seed)
        except TraceError as e:
            raise ConfigError(f"workload.trace: {e}") from None

    def catalog(self, requests: list[Request]):
        c = self.data["catalog"]
        try:
            table = None
            if c["size_table"] is not None:
                table = SizeTable({int(r): int(b) for r, b in c["size_table"].items()})
            if c["path"] is not None:
                p = Path(c["path"])
                return load_catalog(p if p.is_absolute() else self.base_dir / p, table)
            ids = sorted({r.adapter_id for r in requests})
            if c["count"] is not None:
                if c["count"] < len(ids):
                    raise ConfigError(f"catalog.count={c['count']} is below the {len(ids)} "
                                      "adapters the workload uses")
                ids += [f"spare{i}" for i in range(c["count"] - len(ids))]
            mix = {int(r): float(w) for r, w in c["rank_mix"].items()}
            return build_catalog(ids, mix, self.seed, table)
        except AdapterConfigError as e:
            raise ConfigError(f"catalog: {e}") from None


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then dotted-key ``overrides``."""
    data = load_defaults()
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML: {e}") from None
        data = merge(data, user)
        base_dir = path.resolve().parent
    for k, v in (overrides or {}).items():
        set_key(data, k, v)
    return RunConfig(data, base_dir)
