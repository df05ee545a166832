"""Reader and writer for the GPRF binary profile stream.

Layout (little-endian)::

    "GPRF" u16 version
    record*   where record = u8 tag, u32 payload_length, payload

Record payloads are described next to each record class below.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import BinaryIO, List, Tuple, Union

MAGIC = b"GPRF"
VERSION = 1

TAG_META = 0x01
TAG_SAMPLE = 0x02
TAG_RESOLUTION = 0x03
TAG_HEAP_STATS = 0x04
TAG_GC_EVENT = 0x05
TAG_TYPE_MAP = 0x06
TAG_FRAME_MAP = 0x07


class SampleKind(enum.IntEnum):
    NURSERY = 0
    LARGE = 1


class Survival(enum.IntEnum):
    DIED_YOUNG = 0
    TENURED = 1
    UNKNOWN = 0xFF


class GcEventKind(enum.IntEnum):
    MINOR = 0
    MAJOR_PHASE = 1


class ProfileFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class Meta:
    # u64 sample_n_bytes, u64 nursery_size, u64 start_time_ns
    sample_n_bytes: int
    nursery_size: int
    start_time_ns: int


@dataclass(frozen=True)
class SampleRecord:
    # u64 index, u64 timestamp, u8 kind, u64 alloc_size, u16 n, u32 * n
    sample_index: int
    timestamp_ns: int
    kind: SampleKind
    alloc_size: int
    stack: Tuple[int, ...]


@dataclass(frozen=True)
class Resolution:
    # u64 sample_index, u16 type_id, u8 survived
    sample_index: int
    type_id: int
    survived: Survival


@dataclass(frozen=True)
class HeapStatsRecord:
    # u64 timestamp, u64 arenas, u64 used, u64 rss, u8 phase
    timestamp_ns: int
    total_size_of_arenas: int
    total_memory_used: int
    rss: int
    gc_phase: int


@dataclass(frozen=True)
class GcEventRecord:
    # u8 kind, u8 phase, u64 start, u64 end
    kind: GcEventKind
    phase: int
    start_ns: int
    end_ns: int


@dataclass(frozen=True)
class TypeMap:
    # u16 n, (u16 type_id, u16 len, utf-8) * n
    entries: Tuple[Tuple[int, str], ...]


@dataclass(frozen=True)
class FrameMap:
    # u32 n, (u32 frame_id, u16 len, utf-8) * n
    entries: Tuple[Tuple[int, str], ...]


Record = Union[Meta, SampleRecord, Resolution, HeapStatsRecord, GcEventRecord,
               TypeMap, FrameMap]

_META = struct.Struct("<QQQ")
_SAMPLE_HEAD = struct.Struct("<QQBQH")
_RESOLUTION = struct.Struct("<QHB")
_HEAP_STATS = struct.Struct("<QQQQB")
_GC_EVENT = struct.Struct("<BBQQ")
_RECORD_HEAD = struct.Struct("<BI")
_FILE_HEAD = struct.Struct("<4sH")


def _encode_names(count_fmt: str, id_fmt: str, entries) -> bytes:
    parts = [struct.pack(count_fmt, len(entries))]
    for ident, name in entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack(id_fmt + "H", ident, len(raw)))
        parts.append(raw)
    return b"".join(parts)


def encode_record(record: Record) -> bytes:
    if isinstance(record, SampleRecord):
        n = len(record.stack)
        payload = (_SAMPLE_HEAD.pack(record.sample_index, record.timestamp_ns,
                                     record.kind, record.alloc_size, n)
                   + struct.pack(f"<{n}I", *record.stack))
        tag = TAG_SAMPLE
    elif isinstance(record, Resolution):
        payload = _RESOLUTION.pack(record.sample_index, record.type_id, record.survived)
        tag = TAG_RESOLUTION
    elif isinstance(record, HeapStatsRecord):
        payload = _HEAP_STATS.pack(record.timestamp_ns, record.total_size_of_arenas,
                                   record.total_memory_used, record.rss, record.gc_phase)
        tag = TAG_HEAP_STATS
    elif isinstance(record, GcEventRecord):
        payload = _GC_EVENT.pack(record.kind, record.phase, record.start_ns, record.end_ns)
        tag = TAG_GC_EVENT
    elif isinstance(record, Meta):
        payload = _META.pack(record.sample_n_bytes, record.nursery_size,
                             record.start_time_ns)
        tag = TAG_META
    elif isinstance(record, TypeMap):
        payload = _encode_names("<H", "<H", record.entries)
        tag = TAG_TYPE_MAP
    elif isinstance(record, FrameMap):
        payload = _encode_names("<I", "<I", record.entries)
        tag = TAG_FRAME_MAP
    else:
        raise TypeError(f"not a profile record: {record!r}")
    return _RECORD_HEAD.pack(tag, len(payload)) + payload


def dump(records, sink: BinaryIO) -> int:
    """Write the stream to ``sink``; returns the number of bytes written."""
    written = sink.write(_FILE_HEAD.pack(MAGIC, VERSION))
    for record in records:
        written += sink.write(encode_record(record))
    return written


def dumps(records) -> bytes:
    return _FILE_HEAD.pack(MAGIC, VERSION) + b"".join(encode_record(r) for r in records)


@dataclass
class Profile:
    records: List[Record]
    skipped: int = 0

    @property
    def meta(self) -> Meta:
        for record in self.records:
            if isinstance(record, Meta):
                return record
        raise LookupError("profile has no META record")

    def of_type(self, cls) -> list:
        return [r for r in self.records if isinstance(r, cls)]


def _decode_names(payload: bytes, offset: int, count_fmt: str, id_fmt: str):
    count_size = struct.calcsize(count_fmt)
    entry = struct.Struct(id_fmt + "H")
    (count,) = struct.unpack_from(count_fmt, payload, 0)
    pos = count_size
    entries = []
    for _ in range(count):
        if pos + entry.size > len(payload):
            raise ProfileFormatError("truncated name table", offset + pos)
        ident, length = entry.unpack_from(payload, pos)
        pos += entry.size
        if pos + length > len(payload):
            raise ProfileFormatError("truncated name", offset + pos)
        try:
            name = payload[pos:pos + length].decode("utf-8")
        except UnicodeDecodeError:
            raise ProfileFormatError("name is not valid UTF-8", offset + pos) from None
        entries.append((ident, name))
        pos += length
    if pos != len(payload):
        raise ProfileFormatError("trailing bytes in name table", offset + pos)
    return tuple(entries)


def _fixed(struct_: struct.Struct, payload: bytes, offset: int):
    if len(payload) != struct_.size:
        raise ProfileFormatError(
            f"payload of {len(payload)} bytes, expected {struct_.size}", offset)
    return struct_.unpack(payload)



def _decode(tag: int, payload: bytes, offset: int) -> Record:
    if tag == TAG_SAMPLE:
        if len(payload) < _SAMPLE_HEAD.size:
            raise ProfileFormatError("truncated SAMPLE record", offset)
        index, ts, kind, size, n = _SAMPLE_HEAD.unpack_from(payload)
        if len(payload) != _SAMPLE_HEAD.size + 4 * n:
            raise ProfileFormatError("SAMPLE frame count does not match payload", offset)
        stack = struct.unpack_from(f"<{n}I", payload, _SAMPLE_HEAD.size)
        return SampleRecord(index, ts, _enum(SampleKind, kind, offset), size, stack)
    if tag == TAG_RESOLUTION:
        index, type_id, survived = _fixed(_RESOLUTION, payload, offset)
        return Resolution(index, type_id, _enum(Survival, survived, offset))
    if tag == TAG_HEAP_STATS:
        return HeapStatsRecord(*_fixed(_HEAP_STATS, payload, offset))
    if tag == TAG_GC_EVENT:
        kind, phase, start, end = _fixed(_GC_EVENT, payload, offset)
        return GcEventRecord(_enum(GcEventKind, kind, offset), phase, start, end)
    if tag == TAG_META:
        return Meta(*_fixed(_META, payload, offset))
    if tag == TAG_TYPE_MAP:
        if len(payload) < 2:
            raise ProfileFormatError("truncated TYPE_MAP record", offset)
        return TypeMap(_decode_names(payload, offset, "<H", "<H"))
    if len(payload) < 4:
        raise ProfileFormatError("truncated FRAME_MAP record", offset)
    return FrameMap(_decode_names(payload, offset, "<I", "<I"))


def _enum(cls, value, offset):
    try:
        return cls(value)
    except ValueError:
        raise ProfileFormatError(f"invalid {cls.__name__} value {value}", offset) from None


_KNOWN_TAGS = {TAG_META, TAG_SAMPLE, TAG_RESOLUTION, TAG_HEAP_STATS, TAG_GC_EVENT,
               TAG_TYPE_MAP, TAG_FRAME_MAP}


def loads(data: bytes) -> Profile:
    """Parse a complete GPRF stream.  Unknown record tags are skipped and
    counted in ``Profile.skipped``."""
    data = bytes(data)
    if len(data) < _FILE_HEAD.size:
        raise ProfileFormatError("truncated file header", 0)
    magic, version = _FILE_HEAD.unpack_from(data)
    if magic != MAGIC:
        raise ProfileFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise ProfileFormatError(f"unsupported version {version}", 4)
    records: List[Record] = []
    skipped = 0
    pos = _FILE_HEAD.size
    end = len(data)
    while pos < end:
        if pos + _RECORD_HEAD.size > end:
            raise ProfileFormatError("truncated record header", pos)
        tag, length = _RECORD_HEAD.unpack_from(data, pos)
        body = pos + _RECORD_HEAD.size
        if body + length > end:
            raise ProfileFormatError(f"record of {length} bytes runs past end of data", pos)
        if tag in _KNOWN_TAGS:
            records.append(_decode(tag, data[body:body + length], body))
        else:
            skipped += 1
        pos = body + length
    return Profile(records, skipped)


def load(path) -> Profile:
    with open(path, "rb") as f:
        return loads(f.read())
