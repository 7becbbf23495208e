"""Regenerate the bundled demo trace (src/lorasim/data/demo_trace.csv).

60 s, 20 adapters, a mild diurnal swing and a four-adapter hot set that slides
by two every 10 s. Run from the repository root:

    python3 demos/make_demo_trace.py
"""
from pathlib import Path

from lorasim.workload import SyntheticProfile, generate_synthetic, per_adapter_counts, write_trace

OUT = Path(__file__).resolve().parents[1] / "src" / "lorasim" / "data" / "demo_trace.csv"

profile = SyntheticProfile(num_adapters=20, base_rate=3.0, diurnal_amplitude=0.3, period=60.0,
                           hot_set_size=4, rotation_step=2, hot_set_rotation_period=10.0,
                           hot_share=0.85)
requests = generate_synthetic(profile, 60.0, seed=2024)
write_trace(requests, OUT)

counts = per_adapter_counts(requests)
print(f"{len(requests)} requests over {requests[-1].arrival_time / 1000:.1f} s -> {OUT}")
print("busiest adapters:", sorted(counts.items(), key=lambda kv: -kv[1])[:5])
