import csv
import io
import json
import math

import pytest

from gcprof import bench, gprf
from gcprof.bench import BenchRow, RunResult, normalized_overhead, overhead
from gcprof.cli import main
from gcprof.gprf import SampleRecord
from gcprof.recorder import FakeClock

SMALL = {"stretch_depth": 6, "long_lived_depth": 6, "min_depth": 4, "max_depth": 6,
         "array_words": 2000}


def test_run_without_sampling_has_no_samples(tmp_path):
    out = tmp_path / "p.gprf"
    result = bench.run("gcbench_like", 0, out, params=SMALL)
    profile = gprf.load(out)
    assert result.samples == 0 and not profile.of_type(SampleRecord)
    assert profile.meta.sample_n_bytes == 0
    assert result.profile_bytes == out.stat().st_size


def test_run_is_deterministic_with_fake_clock():
    a = bench.run("gcbench_like", 1024, clock=FakeClock(), params=SMALL)
    b = bench.run("gcbench_like", 1024, clock=FakeClock(), params=SMALL)
    assert a.samples > 0
    assert a.sample_ordinals == b.sample_ordinals
    sink_a, sink_b = io.BytesIO(), io.BytesIO()
    bench.run("gcbench_like", 1024, sink_a, clock=FakeClock(), params=SMALL)
    bench.run("gcbench_like", 1024, sink_b, clock=FakeClock(), params=SMALL)
    assert sink_a.getvalue() == sink_b.getvalue()


@pytest.mark.parametrize("workload, params", [
    ("gcbench_like", SMALL),
    ("alloc_loop", {"iterations": 5000}),
    ("string_churn", {"iterations": 2000}),
])
def test_sampling_does_not_change_allocation(workload, params):
    totals = {bench.run(workload, p, nursery_size=1 << 14, params=params).bytes_allocated
              for p in (0, 256, 4096, 1 << 20)}
    assert len(totals) == 1


def test_alloc_loop_period_equals_nursery():
    result = bench.run("alloc_loop", 1 << 14, nursery_size=1 << 14,
                       params={"iterations": 20_000})
    assert result.minor_collections > 5
    assert result.samples == result.minor_collections


def test_string_churn_exercises_large_path(tmp_path):
    out = tmp_path / "s.gprf"
    bench.run("string_churn", 4096, out, nursery_size=1 << 14, params={"iterations": 1000})
    kinds = {r.kind for r in gprf.load(out).of_type(SampleRecord)}
    assert kinds == {gprf.SampleKind.NURSERY, gprf.SampleKind.LARGE}


def test_run_errors(tmp_path):
    with pytest.raises(ValueError):
        bench.run("nope", 0)
    with pytest.raises(ValueError):
        bench.run("alloc_loop", -1)
    with pytest.raises(OSError):
        bench.run("alloc_loop", 0, tmp_path / "missing" / "p.gprf")


@pytest.mark.parametrize("samples_per_second, ratio, expected", [
    (52658, 3.51, 1.05),
    (41081, 3.88, 1.07),
    (8987, 1.97, 1.11),
    (8483, 1.99, 1.12),
])
def test_normalized_overhead_reference_values(samples_per_second, ratio, expected):
    assert round(normalized_overhead(ratio, samples_per_second), 2) == expected


def test_metric_formulas():
    assert overhead(3.0, 2.0) == 1.5
    assert math.isnan(normalized_overhead(1.2, 0))


def _fake_runner(times):
    def runner(workload, period, nursery_size=None, params=None):
        return RunResult(workload, period, times[period], period and 1000 // period * 10,
                         2_000_000_000, 0, 0)
    return runner


def test_bench_report_shape_and_formulas():
    times = {0: 2.0, 32: 3.0, 64: 2.5}
    report = bench.bench(["alloc_loop"], [32, 64], repetitions=3, runner=_fake_runner(times))
    assert len(report.rows) == 9
    rows = report.summary_rows()
    assert [r["period"] for r in rows] == [0, 32, 64]
    r32 = report.for_period("alloc_loop", 32)[0]
    assert r32.overhead == 1.5
    assert r32.samples_per_second == r32.samples / r32.runtime_s
    assert r32.gb_allocated == 2.0 and r32.gb_per_second == 2.0 / 3.0
    assert r32.normalized_overhead == normalized_overhead(1.5, r32.samples_per_second)
    table = report.to_table()
    assert "baseline" in table and "32" in table and "normalized" in table
    parsed = list(csv.DictReader(io.StringIO(report.to_csv())))
    assert len(parsed) == 9 and set(parsed[0]) == set(BenchRow.__dataclass_fields__)


def test_bench_uses_same_repetition_baseline():
    calls = []

    def runner(workload, period, nursery_size=None, params=None):
        calls.append(period)
        rep_time = 1.0 + len(calls) // 3  # drifting machine
        return RunResult(workload, period, rep_time, 0 if period == 0 else 10, 1, 0, 0)

    report = bench.bench(["alloc_loop"], [32], repetitions=4, runner=runner)
    assert calls[0] == 32  # warm-up
    assert len(calls) == 1 + 4 * 2
    for rep in range(4):
        rows = {r.period: r for r in report.rows if r.repetition == rep}
        assert rows[32].overhead == rows[32].runtime_s / rows[0].runtime_s
        assert rows[0].overhead == 1.0


def test_bench_rejects_zero_repetitions():
    with pytest.raises(ValueError):
        bench.bench(["alloc_loop"], [32], repetitions=0)


# -- CLI ---------------------------------------------------------------------

def test_cli_run_convert_validate(tmp_path, capsys):
    profile, out = tmp_path / "p.gprf", tmp_path / "p.json"
    assert main(["run", "alloc_loop", "--sample-bytes", "4k", "--nursery-bytes", "16k",
                 "--out", str(profile)]) == 0
    assert "samples=" in capsys.readouterr().out
    assert main(["convert", str(profile), str(out)]) == 0
    printed = capsys.readouterr().out
    processed = json.loads(out.read_text())
    n = processed["threads"][0]["samples"]["length"]
    assert f"samples={n}" in printed and "counters=3" in printed
    assert main(["validate", str(out)]) == 0


def test_cli_convert_unsampled_run(tmp_path, capsys):
    profile = tmp_path / "p.gprf"
    main(["run", "alloc_loop", "--sample-bytes", "0", "--out", str(profile)])
    assert main(["convert", str(profile)]) == 0
    processed = json.loads((tmp_path / "p.json").read_text())
    assert processed["threads"][0]["samples"]["length"] == 0


def test_cli_convert_bad_input(tmp_path, capsys):
    bad = tmp_path / "bad.gprf"
    bad.write_bytes(b"GPRF\x01\x00\x02\xff")
    assert main(["convert", str(bad)]) == 1
    assert "offset 6" in capsys.readouterr().err


def test_cli_validate_reports_violations(tmp_path, capsys):
    doc = {"meta": {"categories": [{"name": "Other"}]}, "threads": [{
        "stringArray": ["x"],
        "funcTable": {"name": [3], "length": 1},
        "frameTable": {"func": [0], "category": [0], "length": 1},
        "stackTable": {"frame": [0], "prefix": [None], "category": [0], "length": 1},
        "samples": {"stack": [0], "time": [0.0], "length": 1},
        "markers": {"name": [], "startTime": [], "endTime": [], "category": [],
                    "data": [], "length": 0},
    }], "counters": []}
    path = tmp_path / "v.json"
    path.write_text(json.dumps(doc))
    assert main(["validate", str(path)]) == 1
    assert "1 violation" in capsys.readouterr().out


def test_cli_fuzz_pass_and_replay(tmp_path, capsys):
    assert main(["fuzz", "--seed", "3", "--sequences", "5",
                 "--actions-per-sequence", "50"]) == 0
    assert "failures=0" in capsys.readouterr().out
    replay = tmp_path / "r.txt"
    replay.write_text("EnableSampling 64\nAllocObject 100 0\nDisableSampling\n")
    assert main(["fuzz", "--replay", str(replay)]) == 0


def test_cli_fuzz_failure_dumps_reproducer(tmp_path, capsys, monkeypatch):
    from gcprof import fuzz as fuzz_mod
    from test_fuzz import SkipCollectionShift, _with_sampler

    real = fuzz_mod.run_fuzz
    monkeypatch.setattr(fuzz_mod, "run_fuzz", lambda *a, **kw: real(
        *a, heap_factory=_with_sampler(SkipCollectionShift), **kw))
    out = tmp_path / "fail.txt"
    assert main(["fuzz", "--sequences", "20", "--out", str(out)]) == 1
    assert "countdown" in capsys.readouterr().out
    actions = fuzz_mod.load_actions(out.read_text())
    assert actions and out.read_text().startswith("# seed")
    report = fuzz_mod.execute_and_check(actions, heap_factory=_with_sampler(SkipCollectionShift))
    assert report.failure.check == "countdown"


def test_cli_bench_writes_csv(tmp_path, capsys, monkeypatch):
    real = bench.bench
    runner = _fake_runner({0: 1.0, 1024: 1.1, 4096: 1.05})
    monkeypatch.setattr(bench, "bench", lambda *a, **kw: real(*a, runner=runner))
    path = tmp_path / "b.csv"
    assert main(["bench", "alloc_loop", "--periods", "1k,4k", "--repetitions", "2",
                 "--csv", str(path)]) == 0
    assert "1KiB" in capsys.readouterr().out
    assert len(list(csv.DictReader(path.open()))) == 6


def test_cli_usage_errors(capsys):
    with pytest.raises(SystemExit):
        main(["run", "nope"])
    with pytest.raises(SystemExit):
        main(["run", "alloc_loop", "--sample-bytes", "lots"])
