"""Profile recording: shadow call stack, allocation samples, deferred
type/survival resolution, heap statistics and GC events."""
from __future__ import annotations

import os
import time
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional

from . import gprf
from .gprf import (FrameMap, GcEventKind, GcEventRecord, HeapStatsRecord, Meta,
                   Resolution, SampleKind, SampleRecord, Survival, TypeMap)

__all__ = [
    "FrameRegistry", "TypeRegistry", "ProfileRecorder", "SampleKind", "Survival",
    "GcEventKind", "FakeClock", "arena_rss", "os_rss",
]


class FrameRegistry:
    def __init__(self):
        self._ids: Dict[str, int] = {}
        self.names: List[str] = []

    def intern(self, name: str) -> int:
        ident = self._ids.get(name)
        if ident is None:
            ident = self._ids[name] = len(self.names)
            self.names.append(name)
        return ident

    def __len__(self):
        return len(self.names)

    def entries(self):
        return tuple(enumerate(self.names))


class TypeRegistry:
    """Type names keyed by 16-bit id; id 0 is reserved for "unknown"."""

    MAX_TYPES = 0xFFFF

    def __init__(self):
        self._ids: Dict[str, int] = {}
        self.names: List[str] = ["unknown"]

    def register(self, name: str) -> int:
        ident = self._ids.get(name)
        if ident is not None:
            return ident
        if len(self.names) > self.MAX_TYPES:
            raise OverflowError("type registry is full")
        ident = self._ids[name] = len(self.names)
        self.names.append(name)
        return ident

    def name(self, type_id: int) -> str:
        return self.names[type_id]

    def __contains__(self, type_id: int) -> bool:
        return 0 < type_id < len(self.names)

    def entries(self):
        return tuple((i, n) for i, n in enumerate(self.names) if i)


class FakeClock:
    """Deterministic clock: each call returns the previous value plus ``step``."""

    def __init__(self, start: int = 0, step: int = 1000):
        self.now = start
        self.step = step

    def __call__(self) -> int:
        self.now += self.step
        return self.now


def arena_rss(heap) -> int:
    return heap.total_size_of_arenas


def os_rss(heap) -> int:
    try:
        with open("/proc/self/statm") as f:
            resident = int(f.read().split()[1])
        return resident * os.sysconf("SC_PAGE_SIZE")
    except (OSError, ValueError, IndexError):
        return arena_rss(heap)


class ProfileRecorder:
    """Collects the record stream of one heap.

    ``clock`` returns monotonic nanoseconds; ``rss`` maps the heap to a
    resident-set size.  Both are injectable so tests can be deterministic.
    """

    def __init__(self, clock: Optional[Callable[[], int]] = None,
                 rss: Optional[Callable[[object], int]] = None):
        self.clock = clock or time.monotonic_ns
        self.rss = rss or os_rss
        self.frames = FrameRegistry()
        self.types = TypeRegistry()
        self.stack: List[int] = []
        self.records: list = []
        self.start_time_ns = self.clock()
        self.sample_n_bytes = 0
        self.sample_count = 0
        self.heap = None
        self._resolved = set()
        self._finalized = False

    def attach(self, heap) -> None:
        if self.heap is not None and self.heap is not heap:
            raise RuntimeError("recorder is already attached to a heap")
        self.heap = heap

    def note_sampling_period(self, period: int) -> None:
        self.sample_n_bytes = period

    # -- shadow stack --------------------------------------------------

    def push_frame(self, name: str) -> None:
        self.stack.append(self.frames.intern(name))

    def pop_frame(self) -> None:
        if not self.stack:
            raise IndexError("pop from an empty shadow stack")
        self.stack.pop()

    @contextmanager
    def frame(self, name: str):
        self.push_frame(name)
        try:
            yield
        finally:
            self.pop_frame()

    @property
    def depth(self) -> int:
        return len(self.stack)

    # -- samples -------------------------------------------------------

    def sample_now(self, kind: SampleKind, alloc_size: int, object_address: int) -> int:
        index = self.sample_count
        self.sample_count += 1
        self.records.append(
            SampleRecord(index, self.clock(), kind, alloc_size, tuple(self.stack)))
        return index

    def resolve_sampled_objects(self, pending, lookup) -> int:
        """Emit one RESOLUTION per pending ``(address, index, kind)``;
        ``lookup(address, kind)`` gives ``(type_id, Survival)``."""
        records = self.records
        resolved = self._resolved
        for address, index, kind in pending:
            if index in resolved:
                raise RuntimeError(f"sample {index} resolved twice")
            type_id, survived = lookup(address, kind)
            resolved.add(index)
            records.append(Resolution(index, type_id, survived))
        return len(pending)

    # -- heap telemetry ------------------------------------------------

    def record_heap_stats(self, timestamp: Optional[int] = None) -> HeapStatsRecord:
        heap = self.heap
        record = HeapStatsRecord(
            self.clock() if timestamp is None else timestamp,
            heap.total_size_of_arenas,
            heap.total_memory_used,
            self.rss(heap),
            int(heap.phase),
        )
        self.records.append(record)
        return record

    def record_gc_event(self, kind: GcEventKind, phase: int, start: int, end: int) -> None:
        self.records.append(GcEventRecord(kind, int(phase), start, end))

    # -- output --------------------------------------------------------

    def finalize(self) -> None:
        """Flush samples still awaiting a minor collection as unresolved."""
        if self._finalized:
            return
        self._finalized = True
        heap = self.heap
        if heap is None:
            return
        pending = heap.sampler.sampled_young
        heap.sampler.sampled_young = []
        for address, index, kind in pending:
            self._resolved.add(index)
            self.records.append(
                Resolution(index, heap.sampled_type_id(address), Survival.UNKNOWN))

    def profile_records(self) -> list:
        nursery = self.heap.config.nursery_size if self.heap is not None else 0
        records = [Meta(self.sample_n_bytes, nursery, self.start_time_ns)]
        records.extend(self.records)
        if self.types.entries():
            records.append(TypeMap(self.types.entries()))
        if len(self.frames):
            records.append(FrameMap(self.frames.entries()))
        return records

    def serialize(self, sink) -> int:
        self.finalize()
        return gprf.dump(self.profile_records(), sink)

    def to_bytes(self) -> bytes:
        self.finalize()
        return gprf.dumps(self.profile_records())
