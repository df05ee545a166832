"""Generational heap: bump-pointer nursery, copying minor collection into a
segregated old space, a phased mark-sweep old-space collector and a separate
large-object space.

Addresses are plain integers.  The nursery occupies ``[0, nursery_size)``,
the old space and the large-object space live in disjoint ranges above it, so
the region of any address can be told by comparison alone.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .recorder import GcEventKind, ProfileRecorder, SampleKind, Survival
from .sampler import AllocSampler

OLD_BASE = 1 << 40
LARGE_BASE = 1 << 50


class HeapExhausted(MemoryError):
    """The old space or large-object space cannot grow any further."""


class UseAfterFree(RuntimeError):
    """An ObjectRef was dereferenced after its object was moved or freed."""


class HeapCorruption(RuntimeError):
    pass


class GcFlag(enum.IntFlag):
    FORWARDED = 0x1
    TENURED = 0x2
    MARKED = 0x4
    SAMPLED = 0x8


class GcPhase(enum.IntEnum):
    NONE = 0
    SCANNING = 1
    MARKING = 2
    SWEEPING = 3
    FINALIZING = 4


_NEXT_PHASE = {
    GcPhase.NONE: GcPhase.SCANNING,
    GcPhase.SCANNING: GcPhase.MARKING,
    GcPhase.MARKING: GcPhase.SWEEPING,
    GcPhase.SWEEPING: GcPhase.FINALIZING,
    GcPhase.FINALIZING: GcPhase.NONE,
}

# objects created while these phases are active are allocated black
_MARKING_PHASES = (GcPhase.SCANNING, GcPhase.MARKING)


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class HeapConfig:
    nursery_size: int = 1 << 20
    large_object_threshold: Optional[int] = None
    word_size: int = 8
    page_round: int = 4096
    arena_size: Optional[int] = None
    max_heap_size: Optional[int] = None
    major_threshold: Optional[int] = None
    growth_factor: float = 2.0

    def __post_init__(self):
        if not _is_pow2(self.nursery_size):
            raise ValueError("nursery_size must be a power of two")
        if not _is_pow2(self.word_size):
            raise ValueError("word_size must be a power of two")
        if self.large_object_threshold is None:
            object.__setattr__(self, "large_object_threshold", self.nursery_size // 8)
        if not 0 < self.large_object_threshold < self.nursery_size:
            raise ValueError("need 0 < large_object_threshold < nursery_size")
        if self.arena_size is None:
            object.__setattr__(
                self, "arena_size", max(256 * 1024, self.large_object_threshold))
        if self.arena_size < self.large_object_threshold:
            raise ValueError("arena_size must hold the largest old-space object")
        if self.major_threshold is None:
            object.__setattr__(self, "major_threshold", 4 * self.nursery_size)
        if self.page_round <= 0 or self.page_round % self.word_size:
            raise ValueError("page_round must be a positive multiple of word_size")

    @property
    def header_size(self) -> int:
        return self.word_size

    def round_size(self, nbytes: int) -> int:
        mask = self.word_size - 1
        return (nbytes + mask) & ~mask

    def object_size(self, payload_bytes: int) -> int:
        """Total heap footprint of an object with ``payload_bytes`` of payload."""
        return self.round_size(self.header_size + payload_bytes)

    def is_large(self, size: int) -> bool:
        return size > self.large_object_threshold


@dataclass(frozen=True)
class ObjectHeader:
    type_id: int
    gc_flags: int
    size_words: int

    def pack(self) -> int:
        return (self.type_id & 0xFFFF) | (self.gc_flags & 0xFFFF) << 16

    @classmethod
    def unpack(cls, word: int, size_words: int = 0) -> "ObjectHeader":
        return cls(word & 0xFFFF, (word >> 16) & 0xFFFF, size_words)


class HeapObject:
    """Header fields plus the payload words of one object.

    ``refslots`` holds the payload indices tagged as references; all other
    words are scalars.  ``forward`` is only meaningful with FORWARDED set.
    """

    __slots__ = ("type_id", "flags", "payload", "refslots", "forward")

    def __init__(self, type_id: int, nwords: int):
        self.type_id = type_id
        self.flags = 0
        self.payload = [0] * nwords
        self.refslots = None
        self.forward = 0

    @property
    def header(self) -> ObjectHeader:
        return ObjectHeader(self.type_id, int(self.flags), len(self.payload))


class ObjectRef:
    """Mutator handle.  Handles registered as roots are kept up to date by the
    collector; any other handle goes stale at the next collection."""

    __slots__ = ("address", "target")

    def __init__(self, address: int, target: HeapObject):
        self.address = address
        self.target = target

    def __repr__(self):
        return f"ObjectRef({self.address:#x})"


@dataclass
class MinorCollectionReport:
    nursery_used: int
    bytes_copied: int
    objects_copied: int
    samples_resolved: int
    start_ns: int
    end_ns: int

    @property
    def bytes_reclaimed(self) -> int:
        return self.nursery_used - self.bytes_copied


@dataclass
class MajorStats:
    cycles: int = 0
    swept_objects: int = 0
    swept_bytes: int = 0
    live_objects: int = 0
    last_swept_objects: int = 0


class Heap:
    def __init__(self, config: Optional[HeapConfig] = None,
                 recorder: Optional[ProfileRecorder] = None):
        self.config = config = config or HeapConfig()
        self.recorder = recorder if recorder is not None else ProfileRecorder()
        self.recorder.attach(self)
        self._word_mask = config.word_size - 1
        self._word_shift = config.word_size.bit_length() - 1
        self._header_size = config.header_size

        # NurseryState
        self.nursery_start = 0
        self.nursery_free = 0
        self.nursery_top = config.nursery_size
        self.nursery_limit = config.nursery_size
        self.sample_point = 0
        self.sampler = AllocSampler(self)

        self.roots: List[ObjectRef] = []
        self._nursery: Dict[int, HeapObject] = {}
        self._old: Dict[int, HeapObject] = {}
        self._large: Dict[int, HeapObject] = {}
        self._large_sizes: Dict[int, int] = {}
        self._remembered = set()

        self._free_lists: Dict[int, List[int]] = {}
        self._sizes: Dict[int, int] = {}
        self._arenas = 0
        self._arena_free = OLD_BASE
        self._arena_end = OLD_BASE
        self._large_free = LARGE_BASE
        self.old_used = 0
        self.large_used = 0
        self.large_reserved = 0

        self.phase = GcPhase.NONE
        self.major = MajorStats()
        self._next_major = config.major_threshold

        self.minor_collections = 0
        self.malloc_count = 0
        self._nursery_bytes_retired = 0
        self._large_bytes_total = 0

    # ------------------------------------------------------------------
    # allocation

    def allocate(self, size: int, type_id: int) -> ObjectRef:
        """Reserve ``size`` bytes (header included) in the nursery."""
        size = (size + self._word_mask) & ~self._word_mask
        result = self.nursery_free
        self.nursery_free = result + size
        if self.nursery_free > self.nursery_limit:
            return self._allocate_slow(size, type_id)
        obj = HeapObject(type_id, (size - self._header_size) >> self._word_shift)
        self._nursery[result] = obj
        return ObjectRef(result, obj)

    def _allocate_slow(self, size: int, type_id: int) -> ObjectRef:
        before = self.sampler.samples_taken
        result = self.collect_and_reserve(size)
        obj = HeapObject(type_id, (size - self._header_size) >> self._word_shift)
        self._nursery[result] = obj
        if self.sampler.samples_taken != before:
            obj.flags |= GcFlag.SAMPLED
        return ObjectRef(result, obj)

    def collect_and_reserve(self, size: int) -> int:
        """Slow path of :meth:`allocate`; ``nursery_free`` is already advanced
        by ``size``.  Takes any due samples and/or runs a minor collection,
        then returns the address reserved for the object."""
        crossings = 0
        sampler = self.sampler
        if sampler.enabled and self.nursery_limit == self.sample_point:
            crossings = sampler.advance_sample_point()
            if self.nursery_free <= self.nursery_limit:
                result = self.nursery_free - size
                sampler.on_sample_crossing(size, SampleKind.NURSERY, result, crossings)
                return result
        if size > self.nursery_top - self.nursery_start:
            self.nursery_free -= size
            raise ValueError(f"{size} bytes cannot fit in the nursery")
        # genuinely out of nursery space: hand back the reservation and collect
        self.nursery_free -= size
        self.minor_collection()
        result = self.nursery_free
        self.nursery_free = result + size
        if self.nursery_free > self.nursery_limit:
            # the relocated sample point fell inside this reservation
            crossings += sampler.advance_sample_point()
        if crossings:
            sampler.on_sample_crossing(size, SampleKind.NURSERY, result, crossings)
        return result

    def allocate_out_of_nursery(self, size: int, type_id: int) -> ObjectRef:
        size = self.config.round_size(size)
        reserved = -(-size // self.config.page_round) * self.config.page_round
        limit = self.config.max_heap_size
        if limit is not None and self._capacity() + reserved > limit:
            if self.phase == GcPhase.NONE:
                self.major_collection()
            if self._capacity() + reserved > limit:
                raise HeapExhausted(f"cannot reserve {reserved} bytes for a large object")
        address = self._large_free
        self._large_free += reserved
        obj = HeapObject(type_id, (size - self._header_size) // self.config.word_size)
        if self.phase in _MARKING_PHASES:
            obj.flags |= GcFlag.MARKED
        self._large[address] = obj
        self._large_sizes[address] = size
        self.large_used += size
        self.large_reserved += reserved
        self._large_bytes_total += size
        before = self.sampler.samples_taken
        self.sampler.on_large_allocation(size, address)
        if self.sampler.samples_taken != before:
            obj.flags |= GcFlag.SAMPLED
        return ObjectRef(address, obj)

    def malloc(self, size: int, type_id: int) -> ObjectRef:
        """Allocate an object of ``size`` bytes (header included), routing it
        to the nursery or the large-object space by size."""
        if size <= 0:
            raise ValueError("allocation size must be positive")
        if not 0 < type_id < 0x10000:
            raise ValueError(f"invalid type id {type_id}")
        self.malloc_count += 1
        if size > self.config.large_object_threshold:
            return self.allocate_out_of_nursery(size, type_id)
        return self.allocate(size, type_id)

    def new(self, type_id: int, nwords: int) -> ObjectRef:
        return self.malloc(self._header_size + nwords * self.config.word_size, type_id)

    def new_bytes(self, type_id: int, nbytes: int) -> ObjectRef:
        return self.malloc(self.config.object_size(nbytes), type_id)

    # ------------------------------------------------------------------
    # mutator interface

    def add_root(self, ref: ObjectRef) -> ObjectRef:
        self.deref(ref)
        self.roots.append(ref)
        return ref

    def remove_root(self, ref: ObjectRef) -> None:
        roots = self.roots
        if roots and roots[-1] is ref:
            roots.pop()
            return
        for i in range(len(roots) - 1, -1, -1):
            if roots[i] is ref:
                del roots[i]
                return
        raise ValueError(f"{ref!r} is not a root")

    def deref(self, ref: ObjectRef) -> HeapObject:
        address = ref.address
        if address < OLD_BASE:
            obj = self._nursery.get(address)
        elif address < LARGE_BASE:
            obj = self._old.get(address)
        else:
            obj = self._large.get(address)
        if obj is None or obj is not ref.target or obj.flags & GcFlag.FORWARDED:
            raise UseAfterFree(f"stale reference to {address:#x}")
        return obj

    def type_of(self, ref: ObjectRef) -> int:
        return self.deref(ref).type_id

    def length(self, ref: ObjectRef) -> int:
        return len(self.deref(ref).payload)

    def read_field(self, ref: ObjectRef, index: int):
        obj = self.deref(ref)
        value = obj.payload[index]
        if obj.refslots and index in obj.refslots:
            return ObjectRef(value, self._lookup(value))
        return value

    def write_field(self, ref: ObjectRef, index: int, value) -> None:
        obj = self.deref(ref)
        payload = obj.payload
        if not -len(payload) <= index < len(payload):
            raise IndexError(f"field {index} out of range")
        index %= len(payload)
        if isinstance(value, ObjectRef):
            self.deref(value)
            payload[index] = value.address
            if obj.refslots is None:
                obj.refslots = set()
            obj.refslots.add(index)
            if ref.address >= OLD_BASE and value.address < OLD_BASE:
                self._remembered.add(ref.address)
        else:
            payload[index] = value
            if obj.refslots:
                obj.refslots.discard(index)

    def _lookup(self, address: int) -> HeapObject:
        if address < OLD_BASE:
            return self._nursery[address]
        if address < LARGE_BASE:
            return self._old[address]
        return self._large[address]

    # ------------------------------------------------------------------
    # old space

    def _old_alloc(self, size: int) -> int:
        free = self._free_lists.get(size)
        if free:
            return free.pop()
        if self._arena_free + size > self._arena_end:
            arena = self.config.arena_size
            limit = self.config.max_heap_size
            if limit is not None and self._capacity() + arena > limit:
                raise HeapExhausted("old space cannot grow")
            self._arena_free = OLD_BASE + self._arenas * arena
            self._arena_end = self._arena_free + arena
            self._arenas += 1
        address = self._arena_free
        self._arena_free += size
        return address

    def _capacity(self) -> int:
        return self._arenas * self.config.arena_size + self.large_reserved

    @property
    def total_size_of_arenas(self) -> int:
        return self._capacity()

    @property
    def total_memory_used(self) -> int:
        return self.old_used + self.large_used

    @property
    def bytes_allocated(self) -> int:
        """Bytes handed out by both allocators since the heap was created."""
        return (self._nursery_bytes_retired + self.nursery_free - self.nursery_start
                + self._large_bytes_total)

    # ------------------------------------------------------------------
    # minor collection

    def minor_collection(self) -> MinorCollectionReport:
        recorder = self.recorder
        start = recorder.clock()
        nursery = self._nursery
        old = self._old
        sizes = self._sizes
        header = self._header_size
        shift = self._word_shift
        mark_new = self.phase in _MARKING_PHASES
        copied_bytes = 0
        queue: List[HeapObject] = []

        def evacuate(address: int) -> int:
            nonlocal copied_bytes
            obj = nursery[address]
            if obj.flags & GcFlag.FORWARDED:
                return obj.forward
            size = header + (len(obj.payload) << shift)
            new_address = self._old_alloc(size)
            copy = HeapObject.__new__(HeapObject)
            copy.type_id = obj.type_id
            copy.flags = (obj.flags & ~GcFlag.SAMPLED) | GcFlag.TENURED
            if mark_new:
                copy.flags |= GcFlag.MARKED
            copy.payload = obj.payload
            copy.refslots = obj.refslots
            copy.forward = 0
            old[new_address] = copy
            sizes[new_address] = size
            obj.flags |= GcFlag.FORWARDED
            obj.forward = new_address
            copied_bytes += size
            if copy.refslots:
                queue.append(copy)
            return new_address

        for root in self.roots:
            if root.address < OLD_BASE:
                root.address = evacuate(root.address)
                root.target = old[root.address]
        for address in self._remembered:
            obj = old.get(address) or self._large.get(address)
            if obj is None or not obj.refslots:
                continue
            payload = obj.payload
            for slot in obj.refslots:
                if payload[slot] < OLD_BASE:
                    payload[slot] = evacuate(payload[slot])
        self._remembered.clear()
        while queue:
            obj = queue.pop()
            payload = obj.payload
            for slot in obj.refslots:
                if payload[slot] < OLD_BASE:
                    payload[slot] = evacuate(payload[slot])

        used = self.nursery_free - self.nursery_start
        objects_copied = sum(1 for o in nursery.values() if o.flags & GcFlag.FORWARDED)
        self.old_used += copied_bytes
        self._nursery_bytes_retired += used
        self.nursery_free = self.nursery_start
        self.sampler.on_minor_collection(used)
        # dead headers are still intact at this point
        resolved = self.sampler.resolve_pending()
        self._nursery = {}
        self.minor_collections += 1

        end = recorder.clock()
        recorder.record_gc_event(GcEventKind.MINOR, self.phase, start, end)
        recorder.record_heap_stats(timestamp=end)
        report = MinorCollectionReport(used, copied_bytes, objects_copied, resolved,
                                       start, end)
        if (self.phase == GcPhase.NONE
                and self.total_memory_used > self._next_major):
            self.major_collection()
        return report

    def survival_of(self, address: int, kind: SampleKind, reachable_large=None):
        """(type_id, Survival) of a sampled object, valid only between
        evacuation and the reset of the nursery."""
        if kind == SampleKind.NURSERY:
            obj = self._nursery.get(address)
            if obj is None:
                raise HeapCorruption(f"no sampled nursery object at {address:#x}")
            if obj.flags & GcFlag.FORWARDED:
                copy = self._old[obj.forward]
                return copy.type_id, Survival.TENURED
            obj.flags &= ~GcFlag.SAMPLED
            return obj.type_id, Survival.DIED_YOUNG
        obj = self._large.get(address)
        if obj is None:
            raise HeapCorruption(f"no sampled large object at {address:#x}")
        obj.flags &= ~GcFlag.SAMPLED
        if address in reachable_large:
            return obj.type_id, Survival.TENURED
        return obj.type_id, Survival.DIED_YOUNG

    def sampled_type_id(self, address: int) -> int:
        """Type of a pending sampled object, without collecting."""
        if address < OLD_BASE:
            obj = self._nursery.get(address)
        else:
            obj = self._large.get(address)
        return obj.type_id if obj is not None else 0

    def reachable_large(self) -> set:
        return {a for a in self._trace() if a >= LARGE_BASE}

    def _trace(self) -> set:
        """Addresses reachable from the roots."""
        seen = set()
        stack = [r.address for r in self.roots]
        lookup = self._lookup
        while stack:
            address = stack.pop()
            if address in seen:
                continue
            seen.add(address)
            obj = lookup(address)
            if obj.refslots:
                payload = obj.payload
                stack.extend(payload[s] for s in obj.refslots)
        return seen

    # ------------------------------------------------------------------
    # major collection

    def major_collection_step(self) -> GcPhase:
        """Advance the old-space collector by one phase and return the new phase."""
        recorder = self.recorder
        start = recorder.clock()
        phase = _NEXT_PHASE[self.phase]
        if phase == GcPhase.SCANNING:
            self.phase = phase
            if self.nursery_free != self.nursery_start or self.sampler.sampled_young:
                self.minor_collection()
        elif phase == GcPhase.MARKING:
            self.phase = phase
            self._mark()
        elif phase == GcPhase.SWEEPING:
            self.phase = phase
            self._sweep()
        elif phase == GcPhase.FINALIZING:
            self.phase = phase
            self._next_major = max(self.config.major_threshold,
                                   int(self.total_memory_used * self.config.growth_factor))
            self.major.cycles += 1
        else:
            self.phase = phase
        recorder.record_gc_event(GcEventKind.MAJOR_PHASE, phase, start, recorder.clock())
        return phase

    def major_collection(self) -> None:
        """Run the remainder of the current cycle (or one full cycle)."""
        while self.major_collection_step() != GcPhase.NONE:
            pass

    def _mark(self) -> None:
        for address in self._trace():
            if address >= OLD_BASE:
                self._lookup(address).flags |= GcFlag.MARKED

    def _sweep(self) -> None:
        swept = swept_bytes = live = 0
        sizes = self._sizes
        free_lists = self._free_lists
        for address, obj in list(self._old.items()):
            if obj.flags & GcFlag.MARKED:
                obj.flags &= ~GcFlag.MARKED
                live += 1
                continue
            del self._old[address]
            size = sizes.pop(address)
            free_lists.setdefault(size, []).append(address)
            self.old_used -= size
            swept += 1
            swept_bytes += size
            self._remembered.discard(address)
        for address, obj in list(self._large.items()):
            if obj.flags & GcFlag.MARKED:
                obj.flags &= ~GcFlag.MARKED
                live += 1
                continue
            del self._large[address]
            size = self._large_sizes.pop(address)
            self.large_used -= size
            self.large_reserved -= -(-size // self.config.page_round) * self.config.page_round
            swept += 1
            swept_bytes += size
            self._remembered.discard(address)
        self.major.swept_objects += swept
        self.major.swept_bytes += swept_bytes
        self.major.last_swept_objects = swept
        self.major.live_objects = live

    # ------------------------------------------------------------------
    # introspection used by tests and the fuzz harness

    @property
    def old_object_count(self) -> int:
        return len(self._old) + len(self._large)

    def nursery_objects(self) -> Dict[int, HeapObject]:
        return self._nursery

    def check_cursors(self) -> List[str]:
        problems = []
        if not self.nursery_start <= self.nursery_free <= self.nursery_top:
            problems.append(
                f"nursery_free {self.nursery_free} outside "
                f"[{self.nursery_start}, {self.nursery_top}]")
        if self.nursery_limit > self.nursery_top:
            problems.append(f"nursery_limit {self.nursery_limit} > nursery_top")
        return problems

    def check_limit_law(self) -> List[str]:
        if self.sampler.enabled:
            expected = min(self.sample_point, self.nursery_top)
        else:
            expected = self.nursery_top
        if self.nursery_limit != expected:
            return [f"nursery_limit {self.nursery_limit} != {expected}"]
        return []
