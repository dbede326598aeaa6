import csv
import os

import pytest
from hypothesis import given, strategies as st

from boxer.bench import cli
from boxer.bench.failover import DrillAborted, DrillResult, failover_drill, recovery_point
from boxer.bench.latency import LatencyRig, LatencySample, cdf_rows, group_cdfs, read_csv, rtt_bench, ttfb_bench, \
    write_csv


@given(st.lists(st.floats(0.1, 1e6), min_size=1, max_size=300))
def test_cdf_against_sorted_counts(values):
    rows = cdf_rows(values)
    xs = [v for v, _ in rows]
    assert xs == sorted(set(values))
    for v, frac in rows:
        assert frac == sum(1 for x in values if x <= v) / len(values)
    assert rows[-1][1] == 1.0


def test_group_cdfs_split_by_kind_and_metric():
    s = [LatencySample("overlay/p0", "TTFB", "0", 3.0), LatencySample("overlay/p1", "TTFB", "0", 1.0),
         LatencySample("native/p0", "TTFB", "0", 2.0), LatencySample("native/p0", "RTT", "0", 5.0)]
    g = group_cdfs(s)
    assert g[("overlay", "TTFB")] == [(1.0, 0.5), (3.0, 1.0)]
    assert set(g) == {("overlay", "TTFB"), ("native", "TTFB"), ("native", "RTT")}


def test_sample_invariants_and_csv_round_trip(tmp_path):
    with pytest.raises(ValueError):
        LatencySample("native/p0", "TTFB", "0", 0.0)
    with pytest.raises(ValueError):
        LatencySample("native/p0", "LAT", "0", 1.0)
    s = [LatencySample("overlay/p0", "RTT", "3", 12.345), LatencySample("native/p0", "RTT", "3", 11.0)]
    path = tmp_path / "s.csv"
    write_csv(str(path), s)
    assert next(csv.reader(path.open())) == ["scenario", "metric", "run_id", "value_us"]
    assert read_csv(str(path)) == s


def test_zero_reps_writes_nothing(tmp_path, capsys):
    out = tmp_path / "x.csv"
    assert cli.main(["ttfb", "--reps", "0", "--out", str(out)]) == 0
    assert not out.exists()
    assert "nothing written" in capsys.readouterr().err


def test_recovery_point_whole_bins():
    # 10 bins/s; warm-up 0.5 s skips the first five bins
    bins = [0] * 5 + [10] * 25 + [0, 0, 5, 8, 9, 10, 10]
    mean, rec = recovery_point(bins, 100.0, 0.1, kill_ts=103.0)
    assert mean == 10
    # bin 34 (count 9) is the first at >= 90 %; recovery is its end
    assert rec == pytest.approx(100.0 + 3.5)


def test_recovery_point_ignores_bin_straddling_the_kill():
    bins = [10] * 10 + [50] + [10] * 5
    mean, rec = recovery_point(bins, 0.0, 0.1, kill_ts=1.05)
    assert mean == 10 and rec == pytest.approx(1.2)


def test_recovery_point_never_and_no_baseline():
    assert recovery_point([10] * 10 + [0] * 5, 0.0, 0.1, kill_ts=1.0)[1] is None
    with pytest.raises(DrillAborted):
        recovery_point([10] * 10, 0.0, 0.1, kill_ts=0.3)


def test_timeline_marks_events(tmp_path):
    r = DrillResult(3, 0.1, [10, 10, 0, 10], 0.0, kill_ts=0.15, join_ts=0.25, recovery_ts=0.4)
    path = tmp_path / "t.csv"
    r.write_timeline(str(path))
    rows = list(csv.DictReader(path.open()))
    assert [row["events"] for row in rows] == ["", "kill", "join_complete", "recovered"]
    assert rows[0]["ops_per_s"] == "100.0"
    assert r.recovery_s == pytest.approx(0.25)


@pytest.mark.slow
def test_drill_without_kill_is_flat(tmp_path):
    res = failover_drill(k=3, kill_at=3.0, duration=2.0, base_dir=str(tmp_path))
    assert not res.killed and res.recovery_s is None
    steady = res.bins[int(0.5 / res.bin_s):len(res.bins) - 1]
    assert min(steady) > 0 and not any(res.errors)


@pytest.mark.slow
def test_latency_rig_small_run(tmp_path):
    with LatencyRig(pairs=1, base_dir=str(tmp_path)) as rig:
        t = ttfb_bench(rig, reps=8, warmup=2)
        r = rtt_bench(rig, rounds=8, warmup=2)
    assert sorted({(s.scenario, s.metric) for s in t + r}) == [
        ("native/p0", "RTT"), ("native/p0", "TTFB"), ("overlay/p0", "RTT"), ("overlay/p0", "TTFB")]
    assert len(t) == 16 and len(r) == 16


def test_kernel_command_writes_rows(tmp_path, capsys):
    out = tmp_path / "k.csv"
    assert cli.main(["kernel", "--reps", "2", "--samples", "2000", "--steps", "20", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert {r["metric"] for r in rows} == {"CURVE"}
    assert "kernel/numpy" in {r["scenario"] for r in rows}
