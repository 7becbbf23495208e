import math
from dataclasses import replace

import pytest

from helpers import uniform_catalog
from lorasim.adapters import MiB, AdapterSpec
from lorasim.engine import (ABLATION, Cell, ConfigError, CostModel, SimConfig, Simulator,
                            compare_policies, metrics_json, paired_cold_start, parse_cell,
                            read_metrics, read_requests_csv, read_timeseries_csv, requests_csv,
                            run, write_outputs)
from lorasim.predictor import PredictorConfig
from lorasim.prefetch import PrefetchPolicy, Status
from lorasim.workload import LengthDistribution, Request, SyntheticProfile, generate_synthetic

COST = CostModel()
RANK8_COLD = 2.0 + 13 * MiB / 4e9 * 1000.0       # 5.407872 ms
RANK64_COLD = 2.0 + 104 * MiB / 4e9 * 1000.0     # 29.262976 ms
SMALL_PRED = PredictorConfig(window=5, hidden=8, layers=1, embedding_dim=2, batch_size=16)


def cfg(**kw) -> SimConfig:
    kw.setdefault("predictor", SMALL_PRED)
    return SimConfig(**kw)


def req(i, t, a, inp=10, out=3):
    return Request(i, float(t), a, inp, out)


def only(result):
    assert len(result.outcomes) == 1
    return result.outcomes[0]


def short_periodic(seconds=40.0, seed=3, n=12, rate=12.0):
    prof = SyntheticProfile(num_adapters=n, base_rate=rate, hot_set_size=3, rotation_step=1,
                            hot_set_rotation_period=4.0, hot_share=0.95,
                            input_lengths=LengthDistribution("constant", 32),
                            output_lengths=LengthDistribution("constant", 6))
    reqs = generate_synthetic(prof, seconds, seed)
    return uniform_catalog(prof.adapter_ids()), reqs


# -- closed forms ------------------------------------------------------------------

def test_rank8_cold_start_closed_form():
    o = only(run(cfg(policy="reactive", prefetch=False), uniform_catalog(["a"]), [req(0, 0, "a")]))
    assert o.cold_start
    assert o.cold_start_latency == pytest.approx(RANK8_COLD, abs=1e-9)
    assert RANK8_COLD == pytest.approx(5.407872, abs=1e-12)


def test_rank64_cold_start_closed_form():
    o = only(run(cfg(policy="reactive"), uniform_catalog(["a"], 64), [req(0, 0, "a")]))
    assert o.cold_start_latency == pytest.approx(RANK64_COLD, abs=1e-9)
    assert o.cold_start_latency == pytest.approx(COST.transfer_ms(104 * MiB), abs=1e-12)


def test_two_concurrent_rank64_loads_share_the_link():
    res = run(cfg(policy="reactive", demand_loads="async"), uniform_catalog(["a", "b"], 64),
              [req(0, 0, "a"), req(1, 0, "b")])
    lat = sorted(o.cold_start_latency for o in res.outcomes)
    expect = 2.0 + 2 * 104 * MiB / 4e9 * 1000.0    # 56.525952 ms
    assert lat == pytest.approx([expect, expect], abs=1e-9)


def test_staggered_loads_processor_sharing():
    # b starts 10 ms into a's transfer; a has 8 ms of solo flow, then shares
    res = run(cfg(policy="reactive", demand_loads="async"), uniform_catalog(["a", "b"], 64),
              [req(0, 0, "a"), req(1, 10, "b")])
    lat = {o.request.adapter_id: o.cold_start_latency for o in res.outcomes}
    rate = 4e9 / 1000.0                   # bytes/ms
    size = 104 * MiB
    left_a = size - 8 * rate              # at t=10
    # b sits in setup until t=12 while a flows alone
    left_a -= 2 * rate
    t_a = 12 + left_a / (rate / 2)
    left_b = size - (t_a - 12) * rate / 2
    t_b = t_a + left_b / rate
    assert lat["a"] == pytest.approx(t_a, abs=1e-9)
    assert lat["b"] == pytest.approx(t_b - 10, abs=1e-9)


def test_warm_request_has_no_cold_start():
    res = run(cfg(policy="reactive"), uniform_catalog(["a"]), [req(0, 0, "a"), req(1, 500, "a")])
    second = [o for o in res.outcomes if o.request.request_id == 1][0]
    assert not second.cold_start and second.cold_start_latency == 0.0
    assert second.ttft == pytest.approx(COST.prefill_ms(10))


def test_ttft_for_lone_cold_request():
    o = only(run(cfg(policy="reactive"), uniform_catalog(["a"]), [req(0, 0, "a", inp=100)]))
    assert o.ttft == pytest.approx(RANK8_COLD + 5 + 0.1 * 100, abs=1e-9)
    assert o.tpot == pytest.approx(COST.decode_ms(1, 32))


# -- prefetch timeline -------------------------------------------------------------

def test_oracle_prefetch_makes_later_arrival_warm():
    res = run(cfg(policy="oracle"), uniform_catalog(["a"]), [req(0, 500, "a")])
    o = only(res)
    assert not o.cold_start
    assert res.metrics["transfers"]["prefetches"] == 1
    assert res.metrics["transfers"]["prefetch_used"] == 1


def test_request_mid_prefetch_waits_only_for_the_rest():
    # the oracle starts the transfer at t=0; the request lands 3 ms in
    o = only(run(cfg(policy="oracle"), uniform_catalog(["a"]), [req(0, 3, "a")]))
    assert o.cold_start
    assert o.cold_start_latency == pytest.approx(RANK8_COLD - 3, abs=1e-9)


class Recorder(Simulator):
    """Checks engine invariants as the run goes."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.violations = []
        self.round_times = []
        self.compaction_states = []
        self.transfer_states = []

    def _admit(self):
        new = super()._admit()
        if len(self.running) + len(new) < self.cfg.batch_slots:
            waiting = [a for a, q in self.queues.items()
                       if q and self.res[a].status is Status.RESIDENT]
            if waiting:
                self.violations.append(("idle slot with ready work", self.now, waiting))
        return new

    def _release(self, aid):
        if self.in_flight.get(aid):
            self.violations.append(("evicted while in flight", self.now, aid))
        super()._release(aid)

    def _on_prediction_round(self, k):
        self.round_times.append((k, self.now))
        super()._on_prediction_round(k)

    def _maybe_compact(self):
        before = self.stats["compactions"]
        queued = any(self.queues.values())
        active = bool(self.link.active)
        super()._maybe_compact()
        if self.stats["compactions"] > before:
            self.compaction_states.append((queued, active))

    def _on_transfer_complete(self, version):
        super()._on_transfer_complete(version)
        for aid, st in self.res.adapters.items():
            if st.status is Status.STAGING and st.transfer_done:
                self.transfer_states.append((self.now, aid, self.gpu_busy))


def test_promotion_waits_for_batch_boundary():
    # "long" keeps the GPU busy while "b" is prefetched
    reqs = [req(0, 0, "long", inp=10, out=80), req(1, 1500, "b")]
    sim = Recorder(cfg(policy="oracle"), uniform_catalog(["long", "b"]), reqs)
    res = sim.run()
    assert sim.transfer_states, "prefetch should land while a batch runs"
    assert all(busy for _, _, busy in sim.transfer_states)
    b = [o for o in res.outcomes if o.request.adapter_id == "b"][0]
    assert not b.cold_start


# -- invariants over whole runs ------------------------------------------------------

@pytest.fixture(scope="module")
def periodic_runs():
    cat, reqs = short_periodic()
    base = cfg(pool_bytes=6 * 14 * MiB, prefetch_policy=PrefetchPolicy(staging_fraction=0.25),
               batch_slots=8)
    out = {}
    for pol in ("reactive", "predictive", "oracle"):
        sim = Recorder(replace(base, policy=pol), cat, reqs)
        out[pol] = (sim, sim.run())
    return out


def test_accounting_closure(periodic_runs):
    for _, res in periodic_runs.values():
        for o in res.outcomes:
            assert o.ttft == pytest.approx(o.queue_delay + o.cold_start_latency + o.prefill, abs=1e-9)
            assert o.ttft >= o.queue_delay
            assert (o.cold_start_latency > 0) == o.cold_start


def test_throughput_identity(periodic_runs):
    for _, res in periodic_runs.values():
        m = res.metrics
        assert m["throughput_rps"] * m["duration_s"] == pytest.approx(m["completed"], rel=1e-12)


def test_work_conservation_and_safe_eviction(periodic_runs):
    for sim, res in periodic_runs.values():
        assert sim.violations == []
        assert res.metrics["transfers"]["evictions"] > 0


def test_oracle_has_fewest_cold_starts(periodic_runs):
    counts = {p: r.metrics["cold_start"]["count"] for p, (_, r) in periodic_runs.items()}
    assert counts["oracle"] <= counts["predictive"]
    assert counts["oracle"] <= counts["reactive"]


def test_prediction_rounds_on_cadence(periodic_runs):
    sim, _ = periodic_runs["predictive"]
    assert sim.round_times
    assert all(t == k * 100.0 for k, t in sim.round_times)


def test_overhead_breakdown_is_exact(periodic_runs):
    for pol, (_, res) in periodic_runs.items():
        ov = res.metrics["overhead_ms"]
        if pol == "reactive":
            assert ov["rounds"] == 0 and ov["predictor"] == 0
            continue
        assert ov["predictor"] == 2.3 * ov["rounds"]
        assert ov["page_table"] == 0.4 * ov["rounds"]
        assert ov["prefetch_scheduler"] == 0.8 * ov["rounds"]
        assert ov["per_round"] == 3.5


def test_ten_rounds_cost_23ms():
    reqs = [req(i, 90.0 * i, "a") for i in range(20)]
    res = run(cfg(policy="predictive", duration_ms=950.0), uniform_catalog(["a"]), reqs)
    assert res.metrics["overhead_ms"]["rounds"] == 10
    assert res.metrics["overhead_ms"]["predictor"] == pytest.approx(23.0, abs=1e-12)


def mixed_catalog(ids):
    return [AdapterSpec.from_rank(a, (8, 16, 32)[i % 3]) for i, a in enumerate(ids)]


def test_staging_area_too_small_means_no_prefetch():
    # 10% of 32 pages is 3 pages; a rank-8 adapter needs 7
    res = run(cfg(policy="oracle", pool_bytes=64 * MiB), uniform_catalog(["a"]), [req(0, 500, "a")])
    assert res.metrics["transfers"]["prefetches"] == 0 and only(res).cold_start


def test_compaction_only_when_idle():
    _, reqs = short_periodic(seconds=30.0, n=16, rate=8.0)
    cat = mixed_catalog(sorted({r.adapter_id for r in reqs}))
    sim = Recorder(cfg(policy="reactive", compaction_threshold=0.0, pool_bytes=100 * MiB,
                       batch_slots=8), cat, reqs)
    res = sim.run()
    assert res.metrics["transfers"]["compactions"] > 0
    assert sim.compaction_states and all(s == (False, False) for s in sim.compaction_states)
    assert res.metrics["overhead_ms"]["compaction"] > 0


def test_never_compaction():
    cat, reqs = short_periodic(seconds=10.0)
    res = run(cfg(policy="reactive", compaction="never", compaction_threshold=0.0,
                  pool_bytes=5 * 14 * MiB), cat, reqs)
    assert res.metrics["transfers"]["compactions"] == 0


def test_reactive_sync_loads_stall_the_batch():
    reqs = [req(0, 0, "a", out=50), req(1, 100, "b")]
    sync = run(cfg(policy="reactive"), uniform_catalog(["a", "b"], 64), reqs)
    asyn = run(cfg(policy="reactive", demand_loads="async"), uniform_catalog(["a", "b"], 64), reqs)
    assert sync.metrics["overhead_ms"]["load_stall"] > 0
    assert asyn.metrics["overhead_ms"]["load_stall"] == 0
    a_sync = [o for o in sync.outcomes if o.request.adapter_id == "a"][0]
    a_async = [o for o in asyn.outcomes if o.request.adapter_id == "a"][0]
    assert a_sync.tpot > a_async.tpot


def test_block_allocator_run_records_fragmentation():
    catalog = [AdapterSpec.from_rank(f"a{i}", r) for i, r in enumerate([8, 64, 8, 64, 16, 32])]
    reqs = [req(i, 40.0 * i, f"a{i % 6}") for i in range(60)]
    res = run(cfg(policy="reactive", allocator="block", pool_bytes=150 * MiB,
                  metrics_interval_ms=50.0, compaction="never"), catalog, reqs)
    assert res.metrics["completed"] == 60
    assert res.metrics["memory"]["external_frag_mean"] is not None


# -- determinism, validation, files ------------------------------------------------

def test_same_seed_byte_identical(tmp_path):
    cat, reqs = short_periodic(seconds=15.0)
    c = cfg(pool_bytes=6 * 14 * MiB, seed=5)
    a = write_outputs(run(c, cat, reqs), tmp_path / "a")
    b = write_outputs(run(c, cat, reqs), tmp_path / "b")
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()


def test_zero_requests():
    res = run(cfg(policy="reactive"), uniform_catalog(["a"]), [])
    m = res.metrics
    assert m["completed"] == 0 and m["throughput_rps"] == 0.0
    assert m["ttft_ms"]["p50"] is None and m["cold_start"]["latency_ms"]["p50"] is None
    assert requests_csv(res).strip() == ",".join(
        ["request_id", "arrival_ms", "adapter_id", "cold_start", "ttft_ms", "tpot_ms", "queue_ms"])


def test_pool_smaller_than_adapter_rejected():
    with pytest.raises(ConfigError, match="cannot hold"):
        Simulator(cfg(pool_bytes=100 * MiB), uniform_catalog(["a"], 64), [req(0, 0, "a")])


def test_unknown_adapter_rejected():
    with pytest.raises(ConfigError, match="missing from the catalog"):
        Simulator(cfg(), uniform_catalog(["a"]), [req(0, 0, "zzz")])


@pytest.mark.parametrize("kw", [dict(policy="magic"), dict(allocator="slab"),
                                dict(compaction="often"), dict(batch_slots=0),
                                dict(pool_bytes=1024), dict(demand_loads="maybe")])
def test_sim_config_validation(kw):
    with pytest.raises(ConfigError):
        SimConfig(**kw)


def test_cost_model_validation():
    with pytest.raises(ConfigError):
        CostModel(pcie_bandwidth=0)


def test_outputs_reparse(tmp_path):
    cat, reqs = short_periodic(seconds=10.0)
    res = run(cfg(pool_bytes=6 * 14 * MiB, verbose=True), cat, reqs)
    files = write_outputs(res, tmp_path)
    assert set(files) == {"metrics", "requests", "timeseries", "decisions"}
    rows = read_requests_csv(files["requests"])
    assert len(rows) == len(res.outcomes)
    by_id = {o.request.request_id: o for o in res.outcomes}
    for r in rows:
        assert r["ttft_ms"] == pytest.approx(by_id[r["request_id"]].ttft, abs=1e-6)
    ts = read_timeseries_csv(files["timeseries"])
    assert ts.shape == (len(res.timeseries), 4)
    assert read_metrics(files["metrics"]) == res.metrics
    assert files["decisions"].read_text().count("\n") > 1


def test_metrics_json_is_sorted_and_stable():
    cat, reqs = short_periodic(seconds=5.0)
    res = run(cfg(policy="reactive"), cat, reqs)
    assert metrics_json(res) == metrics_json(res)
    assert '"schema_version": 1' in metrics_json(res)


# -- comparisons ---------------------------------------------------------------------

def test_identical_cells_identical_metrics():
    cat, reqs = short_periodic(seconds=10.0)
    cell = Cell("x", "predictive", True, "paged")
    comp = compare_policies(cfg(pool_bytes=6 * 14 * MiB), cat, reqs, [cell, cell])
    assert comp.results[0].metrics == comp.results[1].metrics
    assert all(comp.rows()[1][k + "_delta"] in (0.0, None) for k in ("throughput_rps", "cold_starts"))


def test_ablation_has_four_cells():
    assert [c.name for c in ABLATION] == ["baseline", "+prediction", "+prefetch", "+paging"]
    cat, reqs = short_periodic(seconds=8.0)
    comp = compare_policies(cfg(pool_bytes=6 * 14 * MiB), cat, reqs, ABLATION)
    assert len(comp.rows()) == 4
    assert comp.to_text().count("\n") == 5
    assert comp.to_csv().splitlines()[0].startswith("cell,policy,prefetch,allocator")


def test_compare_needs_two_cells():
    with pytest.raises(ConfigError):
        compare_policies(cfg(), uniform_catalog(["a"]), [req(0, 0, "a")], [ABLATION[0]])


def test_parse_cell():
    assert parse_cell("oracle/paged") == Cell("oracle/paged", "oracle", True, "paged")
    assert not parse_cell("predictive/block/noprefetch").prefetch
    for bad in ("oracle", "oracle/heap", "lru/paged", "oracle/paged/x"):
        with pytest.raises(ConfigError):
            parse_cell(bad)


def test_paired_cold_start(periodic_runs):
    base = periodic_runs["reactive"][1]
    same = paired_cold_start(base, base)
    assert same["reduction"] == pytest.approx(0.0) and same["n"] == base.metrics["cold_start"]["count"]
    orc = paired_cold_start(base, periodic_runs["oracle"][1])
    assert orc["median"] <= orc["base_median"]
    assert math.isfinite(orc["reduction"])
