"""Convert a GPRF stream to the Firefox Profiler's processed-profile JSON.

Each allocation sample becomes a thread sample whose leaf frame names the
allocated type, coloured by what happened to the object at the next minor
collection.  Heap statistics become counter tracks and GC events become
interval markers.
"""
from __future__ import annotations

import json
import logging
from typing import Dict, List, Optional, Tuple

from . import gprf
from .gprf import (FrameMap, GcEventKind, GcEventRecord, HeapStatsRecord, Resolution,
                   SampleRecord, Survival, TypeMap)

log = logging.getLogger(__name__)

PROCESSED_PROFILE_VERSION = 47
GECKO_VERSION = 27

# (name, color); only the names are meaningful to consumers
CATEGORIES = [
    ("Other", "grey"),
    ("Python", "yellow"),
    ("collected", "green"),
    ("tenured", "red"),
    ("unresolved", "darkgray"),
    ("GC", "orange"),
]
CAT_OTHER, CAT_PYTHON, CAT_COLLECTED, CAT_TENURED, CAT_UNRESOLVED, CAT_GC = range(6)

_SURVIVAL_CATEGORY = {
    Survival.DIED_YOUNG: CAT_COLLECTED,
    Survival.TENURED: CAT_TENURED,
    Survival.UNKNOWN: CAT_UNRESOLVED,
}

_PHASE_NAMES = ["none", "scanning", "marking", "sweeping", "finalizing"]

# The viewer draws every counter of category "Memory" as a memory track and
# labels it "Memory" regardless of the counter name.
_COUNTERS = [
    ("total_size_of_arenas", "Space the GC can use for tenured objects"),
    ("total_memory_used", "Bytes occupied by live old-space and large objects"),
    ("rss", "Resident set size of the process"),
]


def _ms(ns: int, start_ns: int) -> float:
    return round((ns - start_ns) / 1e6, 3)


class _Tables:
    def __init__(self):
        self.strings: List[str] = []
        self._string_index: Dict[str, int] = {}
        self.func_name: List[int] = []
        self._func_index: Dict[str, int] = {}
        self.frame_func: List[int] = []
        self.frame_category: List[int] = []
        self._frame_index: Dict[Tuple[int, int], int] = {}
        self.stack_prefix: List[Optional[int]] = []
        self.stack_frame: List[int] = []
        self.stack_category: List[int] = []
        self._stack_index: Dict[Tuple[Optional[int], int], int] = {}

    def string(self, s: str) -> int:
        index = self._string_index.get(s)
        if index is None:
            index = self._string_index[s] = len(self.strings)
            self.strings.append(s)
        return index

    def func(self, name: str) -> int:
        index = self._func_index.get(name)
        if index is None:
            index = self._func_index[name] = len(self.func_name)
            self.func_name.append(self.string(name))
        return index

    def frame(self, name: str, category: int) -> int:
        key = (self.func(name), category)
        index = self._frame_index.get(key)
        if index is None:
            index = self._frame_index[key] = len(self.frame_func)
            self.frame_func.append(key[0])
            self.frame_category.append(category)
        return index

    def stack(self, prefix: Optional[int], frame: int) -> int:
        key = (prefix, frame)
        index = self._stack_index.get(key)
        if index is None:
            index = self._stack_index[key] = len(self.stack_frame)
            self.stack_prefix.append(prefix)
            self.stack_frame.append(frame)
            self.stack_category.append(self.frame_category[frame])
        return index


def _table(**columns) -> dict:
    lengths = {len(v) for v in columns.values()}
    length = lengths.pop() if lengths else 0
    return dict(columns, length=length)


def convert(data: bytes) -> dict:
    """Build the processed profile for a GPRF byte stream."""
    profile = gprf.loads(data)
    if profile.skipped:
        log.warning("skipped %d records with unknown tags", profile.skipped)
    records = profile.records
    meta = profile.meta
    start = meta.start_time_ns

    type_names: Dict[int, str] = {0: "unknown"}
    frame_names: Dict[int, str] = {}
    resolutions: Dict[int, Resolution] = {}
    for record in records:
        if isinstance(record, TypeMap):
            type_names.update(record.entries)
        elif isinstance(record, FrameMap):
            frame_names.update(record.entries)
        elif isinstance(record, Resolution):
            resolutions[record.sample_index] = record

    tables = _Tables()
    sample_stack: List[int] = []
    sample_time: List[float] = []
    marker_name: List[int] = []
    marker_start: List[float] = []
    marker_end: List[float] = []
    marker_data: List[dict] = []
    counter_time: List[float] = []
    counter_values: List[List[int]] = [[] for _ in _COUNTERS]

    for record in records:
        if isinstance(record, SampleRecord):
            prefix = None
            for frame_id in record.stack:
                name = frame_names.get(frame_id, f"frame#{frame_id}")
                prefix = tables.stack(prefix, tables.frame(name, CAT_PYTHON))
            resolution = resolutions.get(record.sample_index)
            if resolution is None:
                type_name, category = "unknown", CAT_UNRESOLVED
            else:
                type_name = type_names.get(resolution.type_id, f"type#{resolution.type_id}")
                category = _SURVIVAL_CATEGORY[resolution.survived]
            leaf = tables.stack(prefix, tables.frame(type_name, category))
            sample_stack.append(leaf)
            sample_time.append(_ms(record.timestamp_ns, start))
        elif isinstance(record, GcEventRecord):
            if record.kind == GcEventKind.MINOR:
                name, data = "GC Minor", {"type": "GC", "kind": "minor"}
            else:
                phase = _PHASE_NAMES[record.phase] if record.phase < 5 else str(record.phase)
                name = f"GC Major ({phase})"
                data = {"type": "GC", "kind": "major", "phase": phase}
            marker_name.append(tables.string(name))
            marker_start.append(_ms(record.start_ns, start))
            marker_end.append(_ms(record.end_ns, start))
            marker_data.append(data)
        elif isinstance(record, HeapStatsRecord):
            counter_time.append(_ms(record.timestamp_ns, start))
            counter_values[0].append(record.total_size_of_arenas)
            counter_values[1].append(record.total_memory_used)
            counter_values[2].append(record.rss)

    n_frames = len(tables.frame_func)
    n_funcs = len(tables.func_name)
    thread = {
        "name": "Allocation Samples",
        "processType": "default",
        "processName": "gcprof",
        "processStartupTime": 0,
        "processShutdownTime": None,
        "registerTime": 0,
        "unregisterTime": None,
        "pausedRanges": [],
        "isMainThread": True,
        "pid": "0",
        "tid": 0,
        "samples": {
            "stack": sample_stack,
            "time": sample_time,
            "weight": None,
            "weightType": "samples",
            "length": len(sample_stack),
        },
        "markers": _table(
            data=marker_data,
            name=marker_name,
            startTime=marker_start,
            endTime=marker_end,
            phase=[1] * len(marker_name),
            category=[CAT_GC] * len(marker_name),
        ),
        "stackTable": _table(
            frame=tables.stack_frame,
            prefix=tables.stack_prefix,
            category=tables.stack_category,
            subcategory=[0] * len(tables.stack_frame),
        ),
        "frameTable": _table(
            address=[-1] * n_frames,
            inlineDepth=[0] * n_frames,
            category=tables.frame_category,
            subcategory=[0] * n_frames,
            func=tables.frame_func,
            nativeSymbol=[None] * n_frames,
            innerWindowID=[0] * n_frames,
            implementation=[None] * n_frames,
            line=[None] * n_frames,
            column=[None] * n_frames,
        ),
        "funcTable": _table(
            isJS=[False] * n_funcs,
            relevantForJS=[False] * n_funcs,
            name=tables.func_name,
            resource=[-1] * n_funcs,
            fileName=[None] * n_funcs,
            lineNumber=[None] * n_funcs,
            columnNumber=[None] * n_funcs,
        ),
        "resourceTable": _table(lib=[], name=[], host=[], type=[]),
        "nativeSymbols": _table(libIndex=[], address=[], name=[], functionSize=[]),
        "stringArray": tables.strings,
    }

    counters = []
    for (name, description), values in zip(_COUNTERS, counter_values):
        # the viewer accumulates counts, so absolute values go in as deltas
        deltas = [b - a for a, b in zip([0] + values, values)]
        counters.append({
            "name": "Memory",
            "category": "Memory",
            "description": f"{name}: {description}",
            "pid": "0",
            "mainThreadIndex": 0,
            "samples": {"time": list(counter_time), "count": deltas,
                        "length": len(counter_time)},
        })

    return {
        "meta": {
            "interval": 1.0,
            "startTime": start / 1e6,
            "profilingStartTime": 0,
            "processType": 0,
            "product": "gcprof",
            "stackwalk": 0,
            "version": GECKO_VERSION,
            "preprocessedProfileVersion": PROCESSED_PROFILE_VERSION,
            "symbolicated": True,
            "sampleUnits": None,
            "categories": [{"name": n, "color": c, "subcategories": ["Other"]}
                           for n, c in CATEGORIES],
            "markerSchema": [{
                "name": "GC",
                "tooltipLabel": "{marker.name}",
                "tableLabel": "{marker.name}",
                "chartLabel": "{marker.data.kind}",
                "display": ["marker-chart", "marker-table", "timeline-memory"],
                "data": [
                    {"key": "kind", "label": "Kind", "format": "string"},
                    {"key": "phase", "label": "Phase", "format": "string"},
                ],
            }],
            "extra": [{
                "label": "Allocation sampling",
                "entries": [
                    {"label": "Sampling period", "format": "bytes",
                     "value": meta.sample_n_bytes},
                    {"label": "Nursery size", "format": "bytes",
                     "value": meta.nursery_size},
                    {"label": "Skipped records", "format": "integer",
                     "value": profile.skipped},
                ],
            }],
        },
        "libs": [],
        "threads": [thread],
        "counters": counters,
    }


def dumps(processed: dict) -> str:
    return json.dumps(processed, ensure_ascii=False, separators=(",", ":"))


def convert_to_json(data: bytes) -> str:
    return dumps(convert(data))


def _check_table(violations, where: str, table, columns) -> int:
    if not isinstance(table, dict):
        violations.append(f"{where}: missing table")
        return 0
    length = table.get("length")
    if not isinstance(length, int) or length < 0:
        violations.append(f"{where}: bad length {length!r}")
        return 0
    for column in columns:
        values = table.get(column)
        if not isinstance(values, list) or len(values) != length:
            violations.append(f"{where}.{column}: column length does not match {length}")
            return 0
    return length


def _index_ok(value, bound: int) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and 0 <= value < bound


def validate(processed: dict) -> List[str]:
    """Return every table-reference violation; empty when the profile is sound."""
    violations: List[str] = []
    categories = processed.get("meta", {}).get("categories")
    if not isinstance(categories, list) or not categories:
        violations.append("meta.categories: missing")
        categories = []
    n_categories = len(categories)
    threads = processed.get("threads")
    if not isinstance(threads, list) or not threads:
        return violations + ["threads: missing"]

    for t, thread in enumerate(threads):
        where = f"threads[{t}]"
        strings = thread.get("stringArray")
        if not isinstance(strings, list):
            violations.append(f"{where}.stringArray: missing")
            strings = []
        n_funcs = _check_table(violations, f"{where}.funcTable", thread.get("funcTable"),
                               ["name"])
        for i in range(n_funcs):
            name = thread["funcTable"]["name"][i]
            if not _index_ok(name, len(strings)):
                violations.append(f"{where}.funcTable[{i}]: name {name!r} out of range")
        n_frames = _check_table(violations, f"{where}.frameTable", thread.get("frameTable"),
                                ["func", "category"])
        for i in range(n_frames):
            func = thread["frameTable"]["func"][i]
            category = thread["frameTable"]["category"][i]
            if not _index_ok(func, n_funcs):
                violations.append(f"{where}.frameTable[{i}]: func {func!r} out of range")
            if category is not None and not _index_ok(category, n_categories):
                violations.append(
                    f"{where}.frameTable[{i}]: category {category!r} out of range")
        n_stacks = _check_table(violations, f"{where}.stackTable", thread.get("stackTable"),
                                ["frame", "prefix", "category"])
        for i in range(n_stacks):
            table = thread["stackTable"]
            prefix, frame = table["prefix"][i], table["frame"][i]
            # a prefix must precede its stack, which rules out cycles
            if prefix is not None and not _index_ok(prefix, i):
                violations.append(
                    f"{where}.stackTable[{i}]: prefix {prefix!r} does not precede the stack")
            if not _index_ok(frame, n_frames):
                violations.append(f"{where}.stackTable[{i}]: frame {frame!r} out of range")
            if not _index_ok(table["category"][i], n_categories):
                violations.append(
                    f"{where}.stackTable[{i}]: category {table['category'][i]!r} out of range")
        n_samples = _check_table(violations, f"{where}.samples", thread.get("samples"),
                                 ["stack", "time"])
        for i in range(n_samples):
            stack = thread["samples"]["stack"][i]
            if stack is not None and not _index_ok(stack, n_stacks):
                violations.append(f"{where}.samples[{i}]: stack {stack!r} out of range")
        n_markers = _check_table(violations, f"{where}.markers", thread.get("markers"),
                                 ["name", "startTime", "endTime", "category", "data"])
        for i in range(n_markers):
            markers = thread["markers"]
            if not _index_ok(markers["name"][i], len(strings)):
                violations.append(f"{where}.markers[{i}]: name out of range")
            if not _index_ok(markers["category"][i], n_categories):
                violations.append(f"{where}.markers[{i}]: category out of range")
            start, end = markers["startTime"][i], markers["endTime"][i]
            if end is not None and start is not None and start > end:
                violations.append(f"{where}.markers[{i}]: ends before it starts")

    for c, counter in enumerate(processed.get("counters", [])):
        where = f"counters[{c}]"
        if not _index_ok(counter.get("mainThreadIndex"), len(threads)):
            violations.append(f"{where}: mainThreadIndex out of range")
        _check_table(violations, f"{where}.samples", counter.get("samples"), ["time", "count"])
    return violations
