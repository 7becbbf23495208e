import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lorasim.workload import (LengthDistribution, Request, SyntheticProfile, TraceError,
                              generate_synthetic, ingest_trace, per_adapter_counts, write_trace)

SHORT = LengthDistribution("constant", 16)

# 99.9% quantile of chi-square with 19 degrees of freedom
CHI2_19_999 = 43.820


def test_rate_matches_base_rate():
    prof = SyntheticProfile(num_adapters=10, base_rate=20.0, diurnal_amplitude=0.0)
    reqs = generate_synthetic(prof, 400.0, seed=5)
    rate = len(reqs) / 400.0
    assert abs(rate - 20.0) / 20.0 < 0.05


def test_diurnal_mean_rate_over_whole_periods():
    prof = SyntheticProfile(base_rate=10.0, diurnal_amplitude=0.8, period=50.0)
    reqs = generate_synthetic(prof, 500.0, seed=1)
    assert abs(len(reqs) / 500.0 - 10.0) < 0.5
    t = np.array([r.arrival_time for r in reqs]) / 1000.0
    phase = (t % 50.0) / 50.0
    # sin > 0 on the first half period, so it must be busier
    assert (phase < 0.5).sum() > 1.5 * (phase >= 0.5).sum()


def test_same_seed_same_stream():
    prof = SyntheticProfile(burstiness=2.0)
    assert generate_synthetic(prof, 30.0, 9) == generate_synthetic(prof, 30.0, 9)
    assert generate_synthetic(prof, 30.0, 9) != generate_synthetic(prof, 30.0, 10)


def test_uniform_shares_when_hot_set_is_everything():
    prof = SyntheticProfile(num_adapters=20, base_rate=40.0, hot_set_size=20)
    reqs = generate_synthetic(prof, 300.0, seed=2)
    counts = np.array([per_adapter_counts(reqs).get(a, 0) for a in prof.adapter_ids()])
    expected = len(reqs) / 20
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_19_999


def test_hot_set_gets_its_share():
    prof = SyntheticProfile(num_adapters=20, base_rate=50.0, hot_set_size=4,
                            hot_set_rotation_period=10.0, hot_share=0.9)
    reqs = generate_synthetic(prof, 200.0, seed=4)
    ids = prof.adapter_ids()
    hot = sum(1 for r in reqs if ids.index(r.adapter_id) in prof.hot_set(r.arrival_time / 1000.0))
    assert abs(hot / len(reqs) - 0.9) < 0.02


def test_burstiness_raises_gap_cv():
    def cv(b):
        reqs = generate_synthetic(SyntheticProfile(base_rate=50.0, burstiness=b), 200.0, seed=3)
        g = np.diff([r.arrival_time for r in reqs])
        return g.std() / g.mean()
    assert abs(cv(1.0) - 1.0) < 0.1
    assert abs(cv(3.0) - 3.0) < 0.6


@pytest.mark.parametrize("kw", [dict(num_adapters=0), dict(diurnal_amplitude=1.5),
                                dict(hot_set_size=30), dict(hot_share=-0.1), dict(burstiness=0)])
def test_profile_validation(kw):
    with pytest.raises(ValueError):
        SyntheticProfile(**kw)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 30), amp=st.floats(0, 1),
       dur=st.floats(1.0, 40.0))
def test_synthetic_stream_invariants(seed, n, amp, dur):
    prof = SyntheticProfile(num_adapters=n, base_rate=5.0, diurnal_amplitude=amp,
                            hot_set_size=min(3, n), input_lengths=SHORT, output_lengths=SHORT)
    reqs = generate_synthetic(prof, dur, seed)
    t = [r.arrival_time for r in reqs]
    assert t == sorted(t)
    assert all(0 <= x <= dur * 1000 for x in t)
    assert [r.request_id for r in reqs] == list(range(len(reqs)))
    assert {r.adapter_id for r in reqs} <= set(prof.adapter_ids())


def _trace(tmp_path, rows, header="timestamp_ms,function_id,input_tokens,output_tokens"):
    p = tmp_path / "t.csv"
    p.write_text(header + "\n" + "\n".join(rows) + "\n")
    return p


def test_rate_scale_divides_gaps(tmp_path):
    p = _trace(tmp_path, ["1000,f,10,5", "1100,f,10,5"])
    reqs = ingest_trace(p, rate_scale=2.0)
    assert [r.arrival_time for r in reqs] == [0.0, 50.0]


def test_distinct_functions_distinct_adapters(tmp_path):
    p = _trace(tmp_path, ["0,x,1,1", "5,y,1,1", "9,z,1,1", "12,x,1,1"])
    reqs = ingest_trace(p)
    assert len({r.adapter_id for r in reqs}) == 3


def test_unsorted_rows_are_sorted(tmp_path):
    p = _trace(tmp_path, ["30,b,1,1", "10,a,1,1"])
    assert [r.adapter_id for r in ingest_trace(p)] == ["a", "b"]


def test_negative_timestamp_names_line(tmp_path):
    p = _trace(tmp_path, ["0,f,1,1", "-5,f,1,1"])
    with pytest.raises(TraceError, match=":3:"):
        ingest_trace(p)


def test_malformed_and_empty(tmp_path):
    with pytest.raises(TraceError, match=":2:"):
        ingest_trace(_trace(tmp_path, ["abc,f,1,1"]))
    with pytest.raises(TraceError, match="no requests"):
        ingest_trace(_trace(tmp_path, []))
    with pytest.raises(TraceError, match="not found"):
        ingest_trace(tmp_path / "missing.csv")


def test_missing_token_columns_are_sampled(tmp_path):
    p = _trace(tmp_path, ["0,f", "10,g"], header="timestamp_ms,function_id")
    reqs = ingest_trace(p, input_lengths=SHORT, output_lengths=LengthDistribution("constant", 3))
    assert [(r.input_tokens, r.output_tokens) for r in reqs] == [(16, 3), (16, 3)]


def test_top_n_mapping_keeps_busiest(tmp_path):
    p = _trace(tmp_path, ["0,a,1,1", "1,b,1,1", "2,b,1,1", "3,c,1,1", "4,c,1,1", "5,c,1,1"])
    reqs = ingest_trace(p, mapping="top_n", num_adapters=2)
    assert [r.adapter_id for r in reqs] == ["a1", "a1", "a0", "a0", "a0"]


def test_write_then_ingest_roundtrip(tmp_path):
    reqs = generate_synthetic(SyntheticProfile(base_rate=3.0), 20.0, 0)
    write_trace(reqs, tmp_path / "w.csv")
    back = ingest_trace(tmp_path / "w.csv")
    shift = reqs[0].arrival_time
    assert [(r.adapter_id, r.input_tokens, r.output_tokens) for r in back] == \
        [(r.adapter_id, r.input_tokens, r.output_tokens) for r in reqs]
    assert np.allclose([r.arrival_time for r in back], [r.arrival_time - shift for r in reqs], atol=1e-3)


def test_request_rejects_negative_arrival():
    with pytest.raises(ValueError):
        Request(0, -1.0, "a", 1, 1)
