"""Paged versus first-fit block allocation under mixed-rank churn.

Runs configs/churn.yaml on both allocators and writes their utilization and
fragmentation time series next to this script (fragmentation_<alloc>.csv).
"""
from pathlib import Path

import numpy as np

from lorasim import engine
from lorasim.config import load_config

HERE = Path(__file__).resolve().parent
rc = load_config(HERE.parent / "configs" / "churn.yaml")
requests = rc.requests()
catalog = rc.catalog(requests)
cfg = rc.sim_config()
ranks = np.bincount([a.rank for a in catalog])
print(f"{len(catalog)} adapters, ranks {dict((r, int(c)) for r, c in enumerate(ranks) if c)}; "
      f"pool {cfg.pool_bytes >> 20} MiB")

comp = engine.compare_policies(cfg, catalog, requests, engine.frag_cells(cfg.policy, cfg.prefetch))
for cell, res in zip(comp.cells, comp.results):
    mem = res.metrics["memory"]
    ts = np.array(res.timeseries)
    path = HERE / f"fragmentation_{cell.name}.csv"
    path.write_text(engine._csv(engine.TIMESERIES_HEADER, res.timeseries))
    print(f"{cell.name:>6}: utilization mean {mem['utilization_mean']:.3f} "
          f"(min {mem['utilization_min']:.3f}), external frag mean {mem['external_frag_mean']:.3f}, "
          f"internal frag mean {mem['internal_frag_mean']:.4f}, "
          f"{mem['frag_events']} loads blocked by fragmentation, {len(ts)} samples -> {path.name}")

print()
print(comp.to_text(), end="")
