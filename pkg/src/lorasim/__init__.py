"""Discrete-event simulator for serving many LoRA adapters from one GPU."""
from .adapters import AdapterSpec, LoraDims, adapter_size_bytes, build_catalog, load_catalog, param_count
from .engine import CostModel, SimConfig, SimResult, Simulator, run
from .memory import BlockArena, PagePool
from .prefetch import PrefetchPolicy
from .workload import Request, SyntheticProfile, generate_synthetic, ingest_trace

__version__ = "0.1.0"

__all__ = [
    "AdapterSpec", "LoraDims", "adapter_size_bytes", "build_catalog", "load_catalog", "param_count",
    "CostModel", "SimConfig", "SimResult", "Simulator", "run", "BlockArena", "PagePool",
    "PrefetchPolicy", "Request", "SyntheticProfile", "generate_synthetic", "ingest_trace",
]
