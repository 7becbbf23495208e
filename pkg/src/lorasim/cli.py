"""``lorasim run|compare|sweep``."""
from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import yaml

from . import engine
from .config import ConfigError, RunConfig, load_config
from .engine import ABLATION, Cell, compare_policies, frag_cells, paired_cold_start, parse_cell
from .workload import TraceError

SWEEPABLE = {
    "window": ("predictor.window", int),
    "theta": ("policy.theta", float),
    "rate": (None, float),
    "page_size": ("allocator.page_size", int),
}


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(raw)
    if args.seed is not None:
        out["seed"] = args.seed
    if getattr(args, "policy", None):
        out["policy.name"] = args.policy
    if getattr(args, "allocator", None):
        out["allocator.kind"] = args.allocator
    if args.out:
        out["output"] = str(Path(args.out).resolve())
    if args.verbose:
        out["engine.verbose"] = True
    return out


def _load(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _summary(m: dict) -> str:
    def f(x, spec=".1f"):
        return "-" if x is None else format(x, spec)
    acc = (m.get("prediction") or {}).get("accuracy")
    return (f"{m['completed']}/{m['requests_total']} requests in {m['duration_s']:.1f} s "
            f"({f(m['throughput_rps'], '.2f')} req/s); TTFT p50 {f(m['ttft_ms']['p50'])} ms, "
            f"p99 {f(m['ttft_ms']['p99'])} ms; cold starts {m['cold_start']['count']} "
            f"(p50 {f(m['cold_start']['latency_ms']['p50'])} ms); hit rate "
            f"{f(m['resident_hit_rate'], '.3f')}; accuracy {f(acc, '.3f')}; "
            f"utilization {f(m['memory']['utilization_mean'], '.3f')}")


def cmd_run(args) -> int:
    rc = _load(args)
    reqs = rc.requests()
    cat = rc.catalog(reqs)
    result = engine.run(rc.sim_config(), cat, reqs)
    files = engine.write_outputs(result, rc.output)
    print(_summary(result.metrics))
    for path in files.values():
        print(f"wrote {path}")
    return 0


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_") or "cell"


def _cells(matrix: str, rc: RunConfig) -> list[Cell]:
    if matrix == "ablation":
        return list(ABLATION)
    if matrix == "frag":
        pol = rc.data["policy"]
        return list(frag_cells(pol["name"], bool(pol["prefetch"])))
    return [parse_cell(c) for c in matrix.split(",") if c.strip()]


def cmd_compare(args) -> int:
    rc = _load(args)
    cells = _cells(args.matrix, rc)
    if len(cells) < 2:
        raise ConfigError(f"--matrix {args.matrix!r} names {len(cells)} cell(s); a comparison needs at least two")
    reqs = rc.requests()
    cat = rc.catalog(reqs)
    comp = compare_policies(rc.sim_config(), cat, reqs, cells)
    out = rc.output
    out.mkdir(parents=True, exist_ok=True)
    for cell, res in zip(comp.cells, comp.results):
        engine.write_outputs(res, out / _slug(cell.name))
    (out / "comparison.csv").write_text(comp.to_csv())
    text = comp.to_text()
    (out / "comparison.txt").write_text(text)
    print(text, end="")
    print(f"wrote {out / 'comparison.csv'}")
    return 0


def _parse_values(raw: str, kind) -> list:
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if not items:
        raise ConfigError("--values is empty")
    out = []
    for v in items:
        try:
            x = float(v)
        except ValueError:
            raise ConfigError(f"--values: {v!r} is not a number") from None
        if kind is int:
            if x != int(x):
                raise ConfigError(f"--values: {v!r} must be an integer")
            x = int(x)
        out.append(x)
    return out


SWEEP_HEADER = ["param", "value", "throughput_rps", "ttft_p50_ms", "ttft_p99_ms", "cold_starts",
                "cold_start_p50_ms", "cold_start_reduction", "resident_hit_rate", "accuracy",
                "utilization_mean"]


def cmd_sweep(args) -> int:
    if args.param not in SWEEPABLE:
        raise ConfigError(f"--param must be one of {sorted(SWEEPABLE)}, got {args.param!r}")
    key, kind = SWEEPABLE[args.param]
    values = _parse_values(args.values, kind)
    base = _overrides(args)
    rows = []
    references: dict = {}
    for v in values:
        over = dict(base)
        if key is not None:
            over[key] = v
        rc = load_config(args.config, over)
        if key is None:
            rc = _with_rate(rc, v)
        reqs = rc.requests()
        cat = rc.catalog(reqs)
        cfg = rc.sim_config()
        res = engine.run(cfg, cat, reqs)
        # reactive reference on the same workload, for the cold-start reduction column
        # window and theta leave the reactive policy untouched, so one reference serves all values
        wkey = None if args.param in ("window", "theta") else v
        if wkey not in references:
            references[wkey] = engine.run(Cell("reference", "reactive", False, cfg.allocator).apply(cfg),
                                          cat, reqs)
        red = paired_cold_start(references[wkey], res, cfg.warmup_ms)["reduction"]
        m = res.metrics
        rows.append([args.param, v, m["throughput_rps"], m["ttft_ms"]["p50"], m["ttft_ms"]["p99"],
                     m["cold_start"]["count"], m["cold_start"]["latency_ms"]["p50"], red,
                     m["resident_hit_rate"], (m["prediction"] or {}).get("accuracy"),
                     m["memory"]["utilization_mean"]])
        print(f"{args.param}={v}: {_summary(m)}", flush=True)
    out = rc.output
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_{args.param}.csv"
    path.write_text(engine._csv(SWEEP_HEADER, [["" if x is None else x for x in r] for r in rows]))
    print(f"wrote {path}")
    return 0


def _with_rate(rc: RunConfig, rate: float) -> RunConfig:
    """Point the workload at ``rate`` requests/s."""
    if rate <= 0:
        raise ConfigError("rate values must be positive")
    w = rc.data["workload"]
    if w["synthetic"] is not None:
        w["synthetic"] = {**w["synthetic"], "base_rate": rate}
        return rc
    native = rc.requests()
    span_s = max(native[-1].arrival_time, 1.0) / 1000.0
    w["rate_scale"] = float(w["rate_scale"]) * rate / (len(native) / span_s)
    return rc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lorasim", description="Multi-adapter serving simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run config (layered over the shipped defaults)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--verbose", action="store_true", help="record the decision log")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a dotted config key, e.g. policy.theta=0.6")

    r = sub.add_parser("run", help="simulate one configuration")
    common(r)
    r.add_argument("--policy", choices=engine.POLICIES)
    r.add_argument("--allocator", choices=engine.ALLOCATORS)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run several policy/allocator cells on one workload")
    common(c)
    c.add_argument("--policy", choices=engine.POLICIES, help="policy for the frag matrix")
    c.add_argument("--matrix", required=True,
                   help="ablation, frag, or a comma list of policy/allocator[/noprefetch] cells")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="one run per parameter value")
    common(s)
    s.add_argument("--policy", choices=engine.POLICIES)
    s.add_argument("--allocator", choices=engine.ALLOCATORS)
    s.add_argument("--param", required=True, help=f"one of {', '.join(SWEEPABLE)}")
    s.add_argument("--values", required=True, help="comma-separated numbers")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TraceError) as e:
        print(f"lorasim: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
