"""Generational heap with zero-fast-path-cost allocation sampling."""
from .gprf import Profile, ProfileFormatError, SampleKind, Survival
from .heap import (GcFlag, GcPhase, Heap, HeapConfig, HeapExhausted, ObjectHeader,
                   ObjectRef, UseAfterFree)
from .recorder import FakeClock, ProfileRecorder

__version__ = "0.1.0"
