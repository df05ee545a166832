"""Allocation sampling folded into the nursery limit.

The sampler never adds work to the allocation fast path.  It keeps
``heap.sample_point`` positioned so that::

    sample_point - nursery_free == sample_n_bytes - bytes allocated since the last sample

and publishes ``nursery_limit = min(sample_point, nursery_top)`` while it is
enabled.  The fast-path comparison ``nursery_free > nursery_limit`` then fires
either because the nursery is full or because a sample is due; the heap's
slow path tells the two apart.  The sample point is virtual: it may lie past
``nursery_top`` when the period exceeds the free nursery space, in which case
minor collections slide it left until it re-enters the nursery.
"""
from __future__ import annotations

from typing import List, Tuple

from .recorder import SampleKind


class AllocSampler:
    def __init__(self, heap):
        self.heap = heap
        self.sample_n_bytes = 0
        self.enabled = False
        self.samples_taken = 0
        # (object address, sample index, kind) since the last minor collection
        self.sampled_young: List[Tuple[int, int, SampleKind]] = []

    @property
    def bytes_until_sample(self) -> int:
        return self.heap.sample_point - self.heap.nursery_free

    def enable(self, period: int) -> None:
        if period <= 0:
            raise ValueError("sampling period must be positive")
        heap = self.heap
        self.sample_n_bytes = period
        self.enabled = True
        heap.sample_point = heap.nursery_free + period
        heap.nursery_limit = min(heap.sample_point, heap.nursery_top)
        heap.recorder.note_sampling_period(period)

    def disable(self) -> None:
        # nursery_top is set when the heap is built, so this is safe even
        # when sampling was never enabled
        self.enabled = False
        self.heap.nursery_limit = self.heap.nursery_top

    def advance_sample_point(self) -> int:
        """Move the sample point forward by whole periods until it is at or
        beyond ``nursery_free`` again; return the number of periods crossed."""
        heap = self.heap
        deficit = heap.nursery_free - heap.sample_point
        crossings = 0
        if deficit > 0:
            crossings = -(-deficit // self.sample_n_bytes)
            heap.sample_point += crossings * self.sample_n_bytes
        heap.nursery_limit = min(heap.sample_point, heap.nursery_top)
        return crossings

    def on_sample_crossing(self, alloc_size: int, kind: SampleKind, address: int,
                           crossings: int = None) -> int:
        """Take one sample per period crossed by the allocation at ``address``.

        ``crossings`` is passed when the caller has already advanced the
        sample point (the nursery slow path must do so before it decides
        whether to collect)."""
        if crossings is None:
            crossings = self.advance_sample_point()
        recorder = self.heap.recorder
        young = self.sampled_young
        for _ in range(crossings):
            index = recorder.sample_now(kind, alloc_size, address)
            young.append((address, index, kind))
        self.samples_taken += crossings
        return crossings

    def on_large_allocation(self, size: int, address: int) -> None:
        if not self.enabled:
            return
        heap = self.heap
        # nursery_free does not move, so the sample point moves left instead
        heap.sample_point -= size
        if heap.sample_point < heap.nursery_free:
            self.on_sample_crossing(size, SampleKind.LARGE, address)
        heap.nursery_limit = min(heap.sample_point, heap.nursery_top)

    def on_minor_collection(self, delta: int) -> None:
        """Shift the sample point by the distance nursery_free moved back."""
        if not self.enabled:
            return
        heap = self.heap
        heap.sample_point -= delta
        heap.nursery_limit = min(heap.sample_point, heap.nursery_top)

    def resolve_pending(self) -> int:
        """Resolve type and survival of every pending sample (end of a minor
        collection); returns how many were resolved."""
        young = self.sampled_young
        if not young:
            return 0
        heap = self.heap
        reachable = None
        if any(kind == SampleKind.LARGE for _, _, kind in young):
            reachable = heap.reachable_large()
        count = heap.recorder.resolve_sampled_objects(
            young, lambda address, kind: heap.survival_of(address, kind, reachable))
        self.sampled_young = []
        return count
