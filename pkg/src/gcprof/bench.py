"""Instrumented workload runs and sampling-period sweeps."""
from __future__ import annotations

import csv
import gc
import io
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence

from .heap import Heap, HeapConfig
from .recorder import ProfileRecorder
from .workloads import get_workload

KIB = 1024
MIB = 1024 * KIB
DEFAULT_PERIODS = (32 * KIB, 128 * KIB, 512 * KIB, 2 * MIB, 4 * MIB)


@dataclass
class RunResult:
    workload: str
    period: int
    runtime_s: float
    samples: int
    bytes_allocated: int
    minor_collections: int
    profile_bytes: int
    sample_ordinals: tuple = ()

    @property
    def samples_per_second(self) -> float:
        return self.samples / self.runtime_s if self.runtime_s > 0 else 0.0

    def summary(self) -> str:
        return (f"{self.workload}: period={self.period} samples={self.samples} "
                f"bytes_allocated={self.bytes_allocated} "
                f"minor_collections={self.minor_collections} runtime={self.runtime_s:.3f}s")


def run(workload: str, period: int, out=None, *, nursery_size: Optional[int] = None,
        clock: Optional[Callable[[], int]] = None, params: Optional[dict] = None,
        timer: Callable[[], float] = time.perf_counter) -> RunResult:
    """Run ``workload`` on a fresh heap with sampling period ``period``
    (0 disables sampling) and write the profile to ``out`` (a path or a
    binary file object) when given."""
    wl = get_workload(workload)
    if period < 0:
        raise ValueError("sampling period must be >= 0")
    config = HeapConfig(nursery_size=nursery_size) if nursery_size else HeapConfig()
    heap = Heap(config, ProfileRecorder(clock=clock))
    if period:
        heap.sampler.enable(period)
    # open the output first so an unwritable path fails before the work
    sink = open(out, "wb") if isinstance(out, (str, bytes)) or hasattr(out, "__fspath__") \
        else out
    try:
        gc_was_enabled = gc.isenabled()
        gc.collect()
        gc.disable()
        try:
            start = timer()
            wl(heap, **(params or {}))
            runtime = timer() - start
        finally:
            if gc_was_enabled:
                gc.enable()
        written = heap.recorder.serialize(sink) if sink is not None else 0
    finally:
        if sink is not None and sink is not out:
            sink.close()
    ordinals = tuple(r.sample_index for r in heap.recorder.records
                     if type(r).__name__ == "SampleRecord")
    return RunResult(workload, period, runtime, heap.sampler.samples_taken,
                     heap.bytes_allocated, heap.minor_collections, written, ordinals)


def overhead(runtime_with: float, runtime_without: float) -> float:
    return runtime_with / runtime_without


def normalized_overhead(overhead_ratio: float, samples_per_second: float) -> float:
    """Overhead scaled to 1000 samples per second."""
    if samples_per_second <= 0:
        return float("nan")
    return 1 + (overhead_ratio - 1) / samples_per_second * 1000


@dataclass
class BenchRow:
    workload: str
    period: int
    repetition: int
    runtime_s: float
    samples: int
    bytes_allocated: int
    samples_per_second: float
    gb_allocated: float
    gb_per_second: float
    overhead: float
    normalized_overhead: float


@dataclass
class OverheadReport:
    rows: List[BenchRow]

    def for_period(self, workload: str, period: int) -> List[BenchRow]:
        return [r for r in self.rows if r.workload == workload and r.period == period]

    def median(self, workload: str, period: int, column: str) -> float:
        return statistics.median(getattr(r, column) for r in self.for_period(workload, period))

    def summary_rows(self) -> List[dict]:
        """One row per (workload, period) with medians over repetitions."""
        keys = []
        for r in self.rows:
            if (r.workload, r.period) not in keys:
                keys.append((r.workload, r.period))
        out = []
        for workload, period in keys:
            row = {"workload": workload, "period": period}
            for column in ("runtime_s", "gb_allocated", "gb_per_second",
                           "samples_per_second", "overhead", "normalized_overhead"):
                row[column] = self.median(workload, period, column)
            out.append(row)
        return out

    def to_csv(self, sink=None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(BenchRow.__dataclass_fields__))
        writer.writeheader()
        for row in self.rows:
            writer.writerow(asdict(row))
        text = buf.getvalue()
        if sink is not None:
            sink.write(text)
        return text

    def to_table(self) -> str:
        header = ("workload", "period", "runtime [s]", "GB alloc", "GB/s",
                  "samples/s", "overhead", "normalized")
        lines = [header]
        for row in self.summary_rows():
            period = "baseline" if row["period"] == 0 else _fmt_bytes(row["period"])
            lines.append((row["workload"], period, f"{row['runtime_s']:.3f}",
                          f"{row['gb_allocated']:.4f}", f"{row['gb_per_second']:.4f}",
                          f"{row['samples_per_second']:.1f}", f"{row['overhead']:.3f}",
                          "-" if row["period"] == 0 else f"{row['normalized_overhead']:.3f}"))
        widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
        return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(line, widths))
                         for line in lines)


def _fmt_bytes(n: int) -> str:
    if n % MIB == 0:
        return f"{n // MIB}MiB"
    if n % KIB == 0:
        return f"{n // KIB}KiB"
    return str(n)


def bench(workloads: Iterable[str], periods: Sequence[int] = DEFAULT_PERIODS,
          repetitions: int = 5, *, nursery_size: Optional[int] = None,
          params: Optional[Dict[str, dict]] = None, runner=run,
          progress: Optional[Callable[[RunResult], None]] = None) -> OverheadReport:
    """Time every period against an unsampled baseline.

    Repetitions are interleaved, with the order rotated each time, so slow
    drift in machine speed hits every configuration alike; each overhead is
    taken against the baseline of the same repetition."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    periods = [p for p in periods if p]
    rows: List[BenchRow] = []
    for workload in workloads:
        get_workload(workload)
        wl_params = (params or {}).get(workload)
        configs = [0] + periods
        # warm-up, discarded
        runner(workload, configs[-1], nursery_size=nursery_size, params=wl_params)
        for rep in range(repetitions):
            # rotate the order so no configuration always runs first
            shift = rep % len(configs)
            by_period = {}
            for p in configs[shift:] + configs[:shift]:
                by_period[p] = runner(workload, p, nursery_size=nursery_size,
                                      params=wl_params)
            baseline = by_period[0]
            for result in (by_period[p] for p in configs):
                if progress:
                    progress(result)
                ratio = overhead(result.runtime_s, baseline.runtime_s)
                sps = result.samples_per_second
                gb = result.bytes_allocated / 1e9
                rows.append(BenchRow(
                    workload, result.period, rep, result.runtime_s, result.samples,
                    result.bytes_allocated, sps, gb,
                    gb / result.runtime_s if result.runtime_s > 0 else 0.0,
                    ratio,
                    float("nan") if result.period == 0 else normalized_overhead(ratio, sps),
                ))
    return OverheadReport(rows)
