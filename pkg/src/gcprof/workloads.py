"""Built-in benchmark workloads.

Every workload is a function ``fn(heap, **params)`` that allocates through
the heap API and keeps the recorder's shadow stack up to date.  Allocation
behaviour depends only on the parameters, so byte totals and sample ordinals
are reproducible; only timings vary.

The heap moves nursery objects, so a workload may only hold on to objects
that are rooted while it allocates.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Dict

from .heap import Heap

# Node layout: left, right, i, j
_NODE_WORDS = 4


def _types(heap: Heap, *names):
    register = heap.recorder.types.register
    return [register(n) for n in names]


def gcbench_like(heap: Heap, stretch_depth: int = 12, long_lived_depth: int = 12,
                 min_depth: int = 4, max_depth: int = 10, array_words: int = 500_000,
                 scale: int = 1) -> None:
    """Binary trees built and dropped in bulk around a long-lived tree and a
    long-lived scalar array, after the classic GC benchmark."""
    node_t, array_t = _types(heap, "Node", "Array")
    recorder = heap.recorder

    def bottom_up(depth):
        # returns a rooted node; the caller removes the root
        with recorder.frame("bottom_up"):
            node = heap.add_root(heap.new(node_t, _NODE_WORDS))
            if depth > 0:
                left = bottom_up(depth - 1)
                right = bottom_up(depth - 1)
                heap.write_field(node, 0, left)
                heap.write_field(node, 1, right)
                heap.remove_root(right)
                heap.remove_root(left)
            return node

    def top_down(node, depth):
        with recorder.frame("top_down"):
            if depth <= 0:
                return
            left = heap.add_root(heap.new(node_t, _NODE_WORDS))
            heap.write_field(node, 0, left)
            right = heap.add_root(heap.new(node_t, _NODE_WORDS))
            heap.write_field(node, 1, right)
            top_down(left, depth - 1)
            top_down(right, depth - 1)
            heap.remove_root(right)
            heap.remove_root(left)

    def tree_size(depth):
        return (1 << (depth + 1)) - 1

    with recorder.frame("gcbench"):
        with recorder.frame("stretch"):
            heap.remove_root(bottom_up(stretch_depth))
        with recorder.frame("long_lived"):
            long_lived = heap.add_root(heap.new(node_t, _NODE_WORDS))
            top_down(long_lived, long_lived_depth)
            array = heap.add_root(heap.new(array_t, array_words))
            for i in range(0, array_words, max(1, array_words // 64)):
                heap.write_field(array, i, i)
        for depth in range(min_depth, max_depth + 1, 2):
            iterations = scale * 2 * tree_size(max_depth) // tree_size(depth)
            with recorder.frame(f"depth_{depth}"):
                for _ in range(iterations):
                    with recorder.frame("build_top_down"):
                        root = heap.add_root(heap.new(node_t, _NODE_WORDS))
                        top_down(root, depth)
                        heap.remove_root(root)
                    with recorder.frame("build_bottom_up"):
                        heap.remove_root(bottom_up(depth))
        heap.remove_root(array)
        heap.remove_root(long_lived)


def alloc_loop(heap: Heap, iterations: int = 200_000, ring: int = 15) -> None:
    """Tight loop of 3-word objects, each stored into a small rooted ring."""
    obj_t, ring_t = _types(heap, "Cell", "Ring")
    with heap.recorder.frame("alloc_loop"):
        slots = heap.add_root(heap.new(ring_t, ring))
        new, write = heap.new, heap.write_field
        for i in range(iterations):
            write(slots, i % ring, new(obj_t, 3))
        heap.remove_root(slots)


def string_churn(heap: Heap, iterations: int = 20_000, keep: int = 64,
                 large_every: int = 200, large_bytes: int = 0, seed: int = 1) -> None:
    """Mostly small strings with an occasional large one; a rotating window
    of recent strings stays alive."""
    str_t, window_t = _types(heap, "String", "Window")
    if large_bytes <= 0:
        large_bytes = heap.config.large_object_threshold + 4096
    rng = random.Random(seed)
    recorder = heap.recorder
    with recorder.frame("string_churn"):
        window = heap.add_root(heap.new(window_t, keep))
        for i in range(iterations):
            if large_every and i % large_every == large_every - 1:
                with recorder.frame("large_string"):
                    s = heap.new_bytes(str_t, large_bytes + rng.randrange(4096))
            else:
                with recorder.frame("small_string"):
                    s = heap.new_bytes(str_t, rng.randrange(1, 256))
            heap.write_field(window, rng.randrange(keep), s)
        heap.remove_root(window)


@dataclass(frozen=True)
class WorkloadSpec:
    name: str
    fn: Callable[..., None]
    params: Dict[str, int] = field(default_factory=dict)

    def __call__(self, heap: Heap, **overrides) -> None:
        self.fn(heap, **{**self.params, **overrides})


WORKLOADS: Dict[str, WorkloadSpec] = {
    wl.name: wl for wl in (
        WorkloadSpec("gcbench_like", gcbench_like),
        WorkloadSpec("alloc_loop", alloc_loop),
        WorkloadSpec("string_churn", string_churn),
    )
}


def get_workload(name: str) -> WorkloadSpec:
    try:
        return WORKLOADS[name]
    except KeyError:
        raise ValueError(
            f"unknown workload {name!r}; choose from {', '.join(sorted(WORKLOADS))}") from None
