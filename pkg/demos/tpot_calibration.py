"""How the decode occupancy factor shapes TPOT.

A decode step takes decode_base_ms * (1 + f * running / slots). This sweeps f on
a moderately loaded 100-adapter workload and prints the mean TPOT of the
reactive and predictive engines, to pick f for a target TPOT.
"""
from dataclasses import replace

from lorasim import engine
from lorasim.adapters import build_catalog
from lorasim.workload import SyntheticProfile, generate_synthetic

profile = SyntheticProfile(num_adapters=100, base_rate=12.0, hot_set_size=10,
                           hot_set_rotation_period=20.0, hot_share=0.6)
requests = generate_synthetic(profile, 60.0, seed=0)
catalog = build_catalog(profile.adapter_ids(), seed=0)
base = engine.SimConfig(duration_ms=60_000.0)

print(" factor  reactive TPOT  predictive TPOT")
for f in (0.0, 0.25, 0.5, 1.0, 1.5):
    cost = replace(base.cost, decode_occupancy_factor=f)
    row = []
    for policy in ("reactive", "predictive"):
        cfg = replace(base, policy=policy, prefetch=policy != "reactive", cost=cost)
        row.append(engine.run(cfg, catalog, requests).metrics["tpot_ms"]["mean"])
    print(f"{f:7.2f}  {row[0]:13.1f}  {row[1]:15.1f}")
