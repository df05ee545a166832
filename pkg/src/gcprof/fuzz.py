"""Randomized differential testing of the heap and its allocation sampler.

Action sequences are generated from a seed, a byte-counting oracle predicts
which actions must take samples (and how many), and the sequence is then run
against a real :class:`~gcprof.heap.Heap` while every intermediate state is
checked.  Failing sequences are shrunk and can be written out as text.

Generation distributions, per action after the optional leading
``EnableSampling`` (present with probability 1/2):

* 2%  toggle sampling, half ``EnableSampling`` / half ``DisableSampling``;
  periods are log-uniform in ``[8, 4 * nursery_size]``
* 3%  ``ForceMinorCollection``
* 5%  large allocation, total size log-uniform in ``(threshold, 4 * threshold]``
* 12% ``DropRoot``, 15% ``AccessObject`` (small allocation if no roots exist)
* rest small allocations, payload log-uniform in ``[1, threshold - header]``

Allocations are split evenly between objects, arrays and strings.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

from .gprf import GcEventKind, GcEventRecord, Resolution, SampleRecord, Survival
from .heap import Heap, HeapConfig, UseAfterFree
from .recorder import ProfileRecorder


@dataclass(frozen=True)
class AllocObject:
    size: int
    n_ref_fields: int = 0


@dataclass(frozen=True)
class AllocArray:
    length: int


@dataclass(frozen=True)
class AllocString:
    length: int


@dataclass(frozen=True)
class DropRoot:
    index: int


@dataclass(frozen=True)
class AccessObject:
    index: int


@dataclass(frozen=True)
class ForceMinorCollection:
    pass


@dataclass(frozen=True)
class EnableSampling:
    period: int


@dataclass(frozen=True)
class DisableSampling:
    pass


Action = Union[AllocObject, AllocArray, AllocString, DropRoot, AccessObject,
               ForceMinorCollection, EnableSampling, DisableSampling]
ALLOCATIONS = (AllocObject, AllocArray, AllocString)
_ACTION_TYPES = {cls.__name__: cls for cls in (
    AllocObject, AllocArray, AllocString, DropRoot, AccessObject,
    ForceMinorCollection, EnableSampling, DisableSampling)}

FUZZ_CONFIG = HeapConfig(nursery_size=4096, large_object_threshold=512,
                         arena_size=4096, page_round=64)


class MalformedActions(ValueError):
    pass


def format_action(action: Action) -> str:
    fields = [str(getattr(action, f)) for f in action.__dataclass_fields__]
    return " ".join([type(action).__name__] + fields)


def parse_action(line: str) -> Action:
    name, *args = line.split()
    try:
        return _ACTION_TYPES[name](*map(int, args))
    except (KeyError, TypeError, ValueError):
        raise MalformedActions(f"cannot parse action {line!r}") from None


def dump_actions(actions, header: str = "") -> str:
    lines = [f"# {h}" for h in header.splitlines()]
    lines += [format_action(a) for a in actions]
    return "\n".join(lines) + "\n"


def load_actions(text: str) -> List[Action]:
    return [parse_action(line) for line in text.splitlines()
            if line.strip() and not line.lstrip().startswith("#")]


def allocation_size(action: Action, config: HeapConfig) -> int:
    """Bytes an allocation action occupies: header plus payload, word rounded."""
    word = config.word_size
    if isinstance(action, AllocObject):
        return config.header_size + -(-action.size // word) * word
    if isinstance(action, AllocArray):
        return config.header_size + action.length * word
    return config.round_size(config.header_size + action.length)


def _payload_words(action: Action, config: HeapConfig) -> int:
    return (allocation_size(action, config) - config.header_size) // config.word_size


# ----------------------------------------------------------------------
# oracle

def reference_sampler_step(allocated_so_far: int, size: int, period: int) -> Tuple[int, int]:
    """Per-allocation counter accumulation with strict-greater crossing.

    Returns ``(samples fired by this allocation, residual counter)``."""
    if period <= 0:
        raise ValueError("period must be positive")
    allocated = allocated_so_far + size
    samples = 0
    while allocated > period:
        samples += 1
        allocated -= period
    return samples, allocated


@dataclass
class OraclePrediction:
    counts: Dict[int, int] = field(default_factory=dict)
    # period minus bytes since the last sample after each action, None while disabled
    countdown: List[Optional[int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def _validate(actions, config: HeapConfig) -> None:
    for ordinal, action in enumerate(actions):
        if not isinstance(action, tuple(_ACTION_TYPES.values())):
            raise MalformedActions(f"action {ordinal} is not an Action: {action!r}")
        for name in action.__dataclass_fields__:
            value = getattr(action, name)
            if not isinstance(value, int) or value < 0:
                raise MalformedActions(f"action {ordinal}: bad {name}={value!r}")
        if isinstance(action, EnableSampling) and action.period <= 0:
            raise MalformedActions(f"action {ordinal}: sampling period must be positive")
        if isinstance(action, AllocObject):
            if action.n_ref_fields > _payload_words(action, config):
                raise MalformedActions(f"action {ordinal}: more ref fields than words")


def predict_samples(actions, config: HeapConfig = FUZZ_CONFIG) -> OraclePrediction:
    _validate(actions, config)
    prediction = OraclePrediction()
    period = None
    allocated = 0
    for ordinal, action in enumerate(actions):
        if isinstance(action, EnableSampling):
            period, allocated = action.period, 0
        elif isinstance(action, DisableSampling):
            period = None
        elif isinstance(action, ALLOCATIONS) and period is not None:
            count, allocated = reference_sampler_step(
                allocated, allocation_size(action, config), period)
            if count:
                prediction.counts[ordinal] = count
        prediction.countdown.append(None if period is None else period - allocated)
    return prediction


# ----------------------------------------------------------------------
# execution

@dataclass(frozen=True)
class Failure:
    index: int
    check: str
    message: str

    def __str__(self):
        return f"action {self.index}: {self.check}: {self.message}"


@dataclass
class FuzzReport:
    seed: object
    actions: List[Action]
    failure: Optional[Failure] = None
    shrunk: Optional[List[Action]] = None
    samples: int = 0
    minor_collections: int = 0

    @property
    def ok(self) -> bool:
        return self.failure is None


_TYPE_NAMES = {AllocObject: "fuzz.Object", AllocArray: "fuzz.Array",
               AllocString: "fuzz.String"}


def _scalar(ordinal: int, slot: int) -> int:
    return (ordinal * 2654435761 + slot * 40503) & 0xFFFFFFFF


class _Run:
    def __init__(self, actions, config, heap_factory):
        self.actions = actions
        self.config = config
        self.recorder = ProfileRecorder()
        self.heap = heap_factory(config, self.recorder)
        self.type_ids = {cls: self.recorder.types.register(name)
                         for cls, name in _TYPE_NAMES.items()}
        self.handles = []
        self.root_ids: List[int] = []
        # ordinal -> (type_id, payload words, children ordinals, {slot: scalar})
        self.objects: Dict[int, tuple] = {}
        self.sample_owner: Dict[int, int] = {}
        self.seen = 0
        # large objects allocated since the last minor collection; the write
        # barrier remembers them, so their young referents survive it even if
        # they are unreachable themselves
        self.large_since_minor: List[int] = []

    def reachable(self, roots) -> set:
        seen = set()
        stack = list(roots)
        while stack:
            oid = stack.pop()
            if oid not in seen:
                seen.add(oid)
                stack.extend(self.objects[oid][2])
        return seen

    def apply(self, ordinal: int, action: Action) -> None:
        heap = self.heap
        if isinstance(action, ALLOCATIONS):
            self.allocate(ordinal, action)
        elif isinstance(action, DropRoot):
            if self.handles:
                j = action.index % len(self.handles)
                heap.remove_root(self.handles.pop(j))
                del self.root_ids[j]
        elif isinstance(action, AccessObject):
            if self.handles:
                j = action.index % len(self.handles)
                self.access(self.handles[j], self.root_ids[j])
        elif isinstance(action, ForceMinorCollection):
            heap.minor_collection()
        elif isinstance(action, EnableSampling):
            heap.sampler.enable(action.period)
        elif isinstance(action, DisableSampling):
            heap.sampler.disable()

    def allocate(self, ordinal: int, action: Action) -> None:
        heap = self.heap
        type_id = self.type_ids[type(action)]
        if isinstance(action, AllocString):
            ref = heap.new_bytes(type_id, action.length)
        else:
            words = (action.length if isinstance(action, AllocArray)
                     else -(-action.size // self.config.word_size))
            ref = heap.new(type_id, words)
        nwords = heap.length(ref)
        children = []
        n_refs = action.n_ref_fields if isinstance(action, AllocObject) else 0
        if self.handles:
            for slot in range(min(n_refs, nwords)):
                k = -(slot + 1) % len(self.handles)
                heap.write_field(ref, slot, self.handles[k])
                children.append(self.root_ids[k])
        scalars = {}
        for slot in {len(children), nwords - 1}:
            if len(children) <= slot < nwords:
                scalars[slot] = _scalar(ordinal, slot)
                heap.write_field(ref, slot, scalars[slot])
        heap.add_root(ref)
        self.handles.append(ref)
        self.root_ids.append(ordinal)
        self.objects[ordinal] = (type_id, nwords, children, scalars)

    def access(self, handle, oid: int) -> None:
        heap = self.heap
        type_id, nwords, children, scalars = self.objects[oid]
        if heap.type_of(handle) != type_id or heap.length(handle) != nwords:
            raise _CheckFailed("access", f"object {oid} has a corrupted header")
        for slot, value in scalars.items():
            if heap.read_field(handle, slot) != value:
                raise _CheckFailed("access", f"object {oid} field {slot} corrupted")
        for slot, child in enumerate(children):
            ref = heap.read_field(handle, slot)
            if heap.type_of(ref) != self.objects[child][0]:
                raise _CheckFailed("access", f"object {oid} field {slot} points to garbage")


class _CheckFailed(Exception):
    def __init__(self, check, message):
        super().__init__(message)
        self.check = check


def execute_and_check(actions, seed=None, config: HeapConfig = FUZZ_CONFIG,
                      heap_factory: Callable = Heap, shrink: bool = False) -> FuzzReport:
    """Run ``actions`` against a fresh heap, checking every intermediate state."""
    actions = list(actions)
    prediction = predict_samples(actions, config)
    failure, run = _execute(actions, prediction, config, heap_factory)
    report = FuzzReport(seed, actions, failure,
                        samples=run.recorder.sample_count,
                        minor_collections=run.heap.minor_collections)
    if failure is not None and shrink:
        report.shrunk = shrink_failure(actions, failure, config, heap_factory)
    return report


def _execute(actions, prediction: OraclePrediction, config, heap_factory):
    run = _Run(actions, config, heap_factory)
    heap = run.heap
    records = run.recorder.records
    for ordinal, action in enumerate(actions):
        roots_before = list(run.root_ids)
        remembered = list(run.large_since_minor)
        try:
            run.apply(ordinal, action)
        except UseAfterFree as exc:
            return Failure(ordinal, "use-after-free", str(exc)), run
        except _CheckFailed as exc:
            return Failure(ordinal, exc.check, str(exc)), run
        except Exception as exc:  # any crash inside the heap is a finding
            return Failure(ordinal, "crash", f"{type(exc).__name__}: {exc}"), run

        problems = heap.check_cursors()
        if problems:
            return Failure(ordinal, "cursor-sanity", "; ".join(problems)), run
        problems = heap.check_limit_law()
        if problems:
            return Failure(ordinal, "limit-law", "; ".join(problems)), run
        expected = prediction.countdown[ordinal]
        if expected is not None:
            actual = heap.sample_point - heap.nursery_free
            if actual != expected:
                return Failure(ordinal, "countdown",
                               f"sample_point - nursery_free = {actual}, expected {expected}"), run

        new = records[run.seen:]
        run.seen = len(records)
        taken = 0
        reachable = evacuated = None
        collected = False
        for record in new:
            if isinstance(record, SampleRecord):
                taken += 1
                run.sample_owner[record.sample_index] = ordinal
            elif isinstance(record, GcEventRecord):
                collected = collected or record.kind == GcEventKind.MINOR
            elif isinstance(record, Resolution):
                if reachable is None:
                    reachable = run.reachable(roots_before)
                    evacuated = run.reachable(roots_before + remembered)
                owner = run.sample_owner.get(record.sample_index)
                if owner is None:
                    return Failure(ordinal, "survival",
                                   f"resolution for unknown sample {record.sample_index}"), run
                if allocation_size(actions[owner], config) > config.large_object_threshold:
                    survivors = reachable
                else:
                    survivors = evacuated
                want = Survival.TENURED if owner in survivors else Survival.DIED_YOUNG
                want_type = run.objects[owner][0]
                if record.survived != want or record.type_id != want_type:
                    return Failure(
                        ordinal, "survival",
                        f"sample {record.sample_index} of action {owner} resolved as "
                        f"({record.type_id}, {record.survived.name}), expected "
                        f"({want_type}, {want.name})"), run
        want = prediction.counts.get(ordinal, 0)
        if taken != want:
            return Failure(ordinal, "sample-count",
                           f"{taken} samples taken, oracle expects {want}"), run
        if collected:
            run.large_since_minor = []
        if (isinstance(action, ALLOCATIONS)
                and allocation_size(action, config) > config.large_object_threshold):
            run.large_since_minor.append(ordinal)
    return None, run


def _fails_like(actions, failure: Failure, config, heap_factory) -> bool:
    try:
        prediction = predict_samples(actions, config)
    except MalformedActions:
        return False
    found, _ = _execute(actions, prediction, config, heap_factory)
    return found is not None and found.check == failure.check


def shrink_failure(actions, failure: Failure, config: HeapConfig = FUZZ_CONFIG,
                   heap_factory: Callable = Heap) -> List[Action]:
    """Truncate to the failing prefix, then greedily delete single actions
    while the sequence still fails the same check."""
    current = list(actions[:failure.index + 1])
    changed = True
    while changed:
        changed = False
        i = len(current) - 1
        while i >= 0:
            candidate = current[:i] + current[i + 1:]
            if candidate and _fails_like(candidate, failure, config, heap_factory):
                current = candidate
                changed = True
            i -= 1
    return current


# ----------------------------------------------------------------------
# generation

def _log_uniform(rng: random.Random, lo: int, hi: int) -> int:
    if hi <= lo:
        return lo
    return min(hi, max(lo, int(math.exp(rng.uniform(math.log(lo), math.log(hi + 1))))))


def _period(rng, config) -> int:
    return _log_uniform(rng, 8, 4 * config.nursery_size)


def _alloc(rng, config, lo_total, hi_total, roots) -> Action:
    header = config.header_size
    payload = _log_uniform(rng, max(1, lo_total - header), hi_total - header)
    kind = rng.randrange(3)
    if kind == 0:
        words = -(-payload // config.word_size)
        return AllocObject(payload, rng.randint(0, min(4, words, roots)))
    if kind == 1:
        return AllocArray(max(0, payload // config.word_size))
    return AllocString(payload)


def generate_actions(rng: random.Random, n: int,
                     config: HeapConfig = FUZZ_CONFIG) -> List[Action]:
    threshold = config.large_object_threshold
    actions: List[Action] = []
    roots = 0
    if n and rng.random() < 0.5:
        actions.append(EnableSampling(_period(rng, config)))
    while len(actions) < n:
        r = rng.random()
        if r < 0.02:
            if rng.random() < 0.5:
                action = EnableSampling(_period(rng, config))
            else:
                action = DisableSampling()
        elif r < 0.05:
            action = ForceMinorCollection()
        elif r < 0.10:
            action = _alloc(rng, config, threshold + 1, 4 * threshold, roots)
        elif r < 0.22 and roots:
            action = DropRoot(rng.randrange(roots))
        elif 0.22 <= r < 0.37 and roots:
            action = AccessObject(rng.randrange(roots))
        else:
            action = _alloc(rng, config, 1, threshold, roots)
        if isinstance(action, ALLOCATIONS):
            roots += 1
        elif isinstance(action, DropRoot):
            roots -= 1
        actions.append(action)
    return actions


@dataclass
class FuzzSummary:
    seed: int
    sequences: int
    actions: int = 0
    samples: int = 0
    minor_collections: int = 0
    failures: List[FuzzReport] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def sequence_rng(seed: int, index: int) -> random.Random:
    return random.Random(f"{seed}/{index}")


def run_fuzz(seed: int = 42, sequences: int = 1000, actions_per_sequence: int = 200,
             shrink: bool = True, config: HeapConfig = FUZZ_CONFIG,
             heap_factory: Callable = Heap, stop_after: Optional[int] = 1) -> FuzzSummary:
    summary = FuzzSummary(seed, sequences)
    for index in range(sequences):
        actions = generate_actions(sequence_rng(seed, index), actions_per_sequence, config)
        report = execute_and_check(actions, seed=(seed, index), config=config,
                                   heap_factory=heap_factory, shrink=shrink)
        summary.actions += len(actions)
        summary.samples += report.samples
        summary.minor_collections += report.minor_collections
        if not report.ok:
            summary.failures.append(report)
            if stop_after is not None and len(summary.failures) >= stop_after:
                break
    return summary
