"""Saturation: why staged loading beats synchronous copies.

With no staging area the reactive engine copies a missing adapter straight into
the active pool and the next iteration waits for it. The predictive engine
copies into a staging buffer while the GPU keeps decoding. About 2 min.
"""
from pathlib import Path

from lorasim import engine
from lorasim.config import load_config

rc = load_config(Path(__file__).resolve().parents[1] / "configs" / "saturation.yaml")
requests = rc.requests()
catalog = rc.catalog(requests)
cfg = rc.sim_config()
cells = [engine.Cell("reactive+block", "reactive", False, "block"),
         engine.Cell("predictive+paged", "predictive", True, "paged")]
comp = engine.compare_policies(cfg, catalog, requests, cells)
for cell, res in zip(cells, comp.results):
    m = res.metrics
    print(f"{cell.name:>17}: {m['completed']} done in {m['duration_s']:.0f} s "
          f"({m['throughput_rps']:.1f} req/s), TPOT {m['tpot_ms']['mean']:.1f} ms, "
          f"load stall {m['overhead_ms']['load_stall'] / 1000:.1f} s")
ratio = comp.results[1].metrics["completed"] / comp.results[0].metrics["completed"]
print(f"throughput ratio {ratio:.2f}")
