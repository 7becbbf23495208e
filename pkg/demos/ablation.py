"""Component ablation on the bundled demo trace: baseline, +prediction,
+prefetch, +paging. Same as `lorasim compare --config configs/demo.yaml --matrix ablation`."""
from pathlib import Path

from lorasim import engine
from lorasim.config import load_config

rc = load_config(Path(__file__).resolve().parents[1] / "configs" / "demo.yaml")
requests = rc.requests()
comp = engine.compare_policies(rc.sim_config(), rc.catalog(requests), requests, engine.ABLATION)
print(comp.to_text(), end="")
