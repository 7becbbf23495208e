"""Where cold starts come from, and how much forecasting removes.

Runs the periodic workload (configs/periodic.yaml) under the reactive, oracle
and LSTM policies and walks through the numbers. About 15 s.
"""
from dataclasses import replace
from pathlib import Path

from lorasim import engine
from lorasim.config import load_config

rc = load_config(Path(__file__).resolve().parents[1] / "configs" / "periodic.yaml")
requests = rc.requests()
catalog = rc.catalog(requests)
base = rc.sim_config()
print(f"{len(requests)} requests, {len(catalog)} adapters of {catalog[0].weight_bytes >> 20} MiB, "
      f"pool {base.pool_bytes >> 20} MiB ({base.pool_bytes // catalog[0].weight_bytes} adapters)")

# A rank-8 adapter over an idle link: 2 ms setup plus 13 MiB at 4 GB/s.
print(f"one cold start costs {base.cost.transfer_ms(catalog[0].weight_bytes):.3f} ms of copy time\n")

runs = {p: engine.run(replace(base, policy=p), catalog, requests)
        for p in ("reactive", "oracle", "predictive")}

for name, res in runs.items():
    m = res.metrics
    acc = (m["prediction"] or {}).get("accuracy")
    print(f"{name:>10}: {m['cold_start']['count']:4d} cold starts, hit rate "
          f"{m['resident_hit_rate']:.3f}, TTFT p99 {m['ttft_ms']['p99']:.1f} ms"
          + (f", accuracy {acc:.3f}" if acc is not None else ""))

# Reactive cold starts happen while warm. Ask what the other policies left on
# those same requests: a request they made warm counts as 0 ms.
print()
for name in ("oracle", "predictive"):
    pc = engine.paired_cold_start(runs["reactive"], runs[name], base.warmup_ms)
    print(f"{name:>10}: median penalty on reactive's {pc['n']} cold requests "
          f"{pc['base_median']:.2f} -> {pc['median']:.2f} ms ({pc['reduction']:.0%} lower)")

t = runs["predictive"].metrics["transfers"]
print(f"\nLSTM prefetches: {t['prefetches']} issued, {t['prefetch_used']} used before eviction, "
      f"{t['prefetch_wasted']} evicted unused")
