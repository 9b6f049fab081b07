import pytest

from mudguard.datapath import Datapath
from mudguard.datapath.bench import COLUMNS, TimingStats, _timed, bench, bench_rules, render_table


def test_single_sample():
    s = TimingStats.from_samples([42])
    assert s.min == s.median == s.avg == s.p90 == s.p99 == s.max == 42 and s.stddev == 0


def test_known_samples():
    s = TimingStats.from_samples(range(1, 101))
    assert (s.min, s.median, s.avg, s.max) == (1, 50.5, 50.5, 100)
    assert s.p90 == pytest.approx(90.1) and s.p99 == pytest.approx(99.01)
    assert s.stddev == pytest.approx(29.011, abs=1e-3)


def test_empty_rejected():
    with pytest.raises(ValueError):
        TimingStats.from_samples([])


def test_table_layout():
    results = bench(20, 200)
    assert list(results) == ["Insert rule", "Delete rule", "Datapath"]
    assert results["Insert rule"].samples == 20 and results["Datapath"].samples == 200
    lines = render_table(results).splitlines()
    assert lines[0] == "(time in ns)"
    assert lines[1].split() == ["Experiment", *COLUMNS]
    assert len(lines) == 6


def test_bench_leaves_table_empty():
    dp = Datapath()
    bench(10, 10, installed=5, datapath=dp)
    assert len(dp) == 0


def test_datapath_median_below_insert_median():
    r = bench(255, 10000)
    assert r["Datapath"].median < r["Insert rule"].median


def test_lookup_median_below_insert_median():
    dp = Datapath()
    rules = bench_rules(255)
    insert = TimingStats.from_samples(_timed(dp.insert_rule, [(r,) for r in rules]))
    lookup = TimingStats.from_samples(_timed(dp.lookup, [(r.key,) for r in rules * 40]))
    assert lookup.median < insert.median
