"""On-disk primitives: entries, SSTable files, MemTables and the page buffer pool.

Entries travel through the engine as plain ``(key, seq, kind, value)`` tuples;
:class:`Entry` is the named view of the same shape, so the two compare equal.
"""

from __future__ import annotations

import enum
import mmap
import os
import struct
import threading
import zlib
from bisect import bisect_left, bisect_right
from collections import OrderedDict
from operator import itemgetter
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

from sortedcontainers import SortedDict

MAX_KEY_BYTES = 1024
MAX_VALUE_BYTES = 64 * 1024

SST_MAGIC = b"AHAT"
SST_VERSION = 1
INDEX_INTERVAL = 16

_HEADER = SST_MAGIC + struct.pack("<H", SST_VERSION)
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_TAIL = struct.Struct("<QBI")  # seq, kind, value_len
_RECORD_OVERHEAD = 4 + 8 + 1 + 4

key_of = itemgetter(0)
_OPEN_LOCK = threading.Lock()


class AhaError(Exception):
    """Base class for engine errors."""


class InputError(AhaError, ValueError):
    """Rejected user input (sizes, ranges, hotspot sets)."""


class CorruptionError(AhaError):
    """A file failed structural or checksum validation."""


class PoolExhaustedError(AhaError):
    """Every frame in the buffer pool is pinned."""


class Kind(enum.IntEnum):
    PUT = 0
    TOMBSTONE = 1


PUT = int(Kind.PUT)
TOMBSTONE = int(Kind.TOMBSTONE)


class Entry(NamedTuple):
    key: bytes
    seq: int
    kind: int
    value: bytes


class KeyRange(NamedTuple):
    """Half-open key interval ``[lo, hi)``; ``None`` means unbounded."""

    lo: Optional[bytes]
    hi: Optional[bytes]

    def contains(self, key: bytes) -> bool:
        return (self.lo is None or key >= self.lo) and (self.hi is None or key < self.hi)

    def overlaps(self, lo: Optional[bytes], hi: Optional[bytes]) -> bool:
        return ranges_overlap(self.lo, self.hi, lo, hi)


def ranges_overlap(alo, ahi, blo, bhi) -> bool:
    """Whether half-open ranges [alo, ahi) and [blo, bhi) intersect."""
    if ahi is not None and blo is not None and ahi <= blo:
        return False
    if bhi is not None and alo is not None and bhi <= alo:
        return False
    return True


def span_overlaps(min_key: bytes, max_key: bytes, lo, hi) -> bool:
    """Whether the closed span [min_key, max_key] meets [lo, hi)."""
    if lo is not None and max_key < lo:
        return False
    if hi is not None and min_key >= hi:
        return False
    return True


def encoded_size(key: bytes, value: bytes) -> int:
    return _RECORD_OVERHEAD + len(key) + len(value)


def check_entry(key: bytes, value: bytes) -> None:
    if not isinstance(key, (bytes, bytearray)) or not isinstance(value, (bytes, bytearray)):
        raise InputError("keys and values must be bytes")
    if not 1 <= len(key) <= MAX_KEY_BYTES:
        raise InputError(f"key length {len(key)} outside 1..{MAX_KEY_BYTES}")
    if len(value) > MAX_VALUE_BYTES:
        raise InputError(f"value length {len(value)} exceeds {MAX_VALUE_BYTES}")


def encode_records(entries: Iterable[tuple]) -> bytes:
    parts = []
    extend = parts.extend
    u32 = _U32.pack
    tail = _TAIL.pack
    for key, seq, kind, value in entries:
        extend((u32(len(key)), key, tail(seq, kind, len(value)), value))
    return b"".join(parts)


def decode_records(buf, off: int, end: int, limit: int = -1) -> tuple[list, int]:
    """Decode records from ``buf[off:end]``; stop after ``limit`` records if given."""
    out = []
    append = out.append
    u32 = _U32.unpack_from
    tail = _TAIL.unpack_from
    while off < end and limit != 0:
        (klen,) = u32(buf, off)
        off += 4
        key = buf[off:off + klen]
        off += klen
        seq, kind, vlen = tail(buf, off)
        off += 13
        append((key, seq, kind, buf[off:off + vlen]))
        off += vlen
        limit -= 1
    return out, off


class IOStats:
    """Byte and block counters shared by every component of one engine."""

    FIELDS = (
        "logical_bytes",
        "sst_bytes_written",
        "flush_bytes_written",
        "compaction_bytes_written",
        "migration_bytes_written",
        "split_bytes_written",
        "adapt_bytes_written",
        "page_bytes_written",
        "page_writes",
        "page_reads",
        "data_block_reads",
        "data_bytes_read",
        "node_empty_calls",
        "aligned_node_empty_calls",
        "aligned_migration_bytes_written",
    )

    def __init__(self) -> None:
        self._lock = threading.Lock()
        for name in self.FIELDS:
            setattr(self, name, 0)

    def add(self, name: str, amount: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + amount)

    @property
    def physical_bytes_written(self) -> int:
        return self.sst_bytes_written + self.page_bytes_written

    @property
    def write_amplification(self) -> float:
        if not self.logical_bytes:
            return 0.0
        return self.physical_bytes_written / self.logical_bytes

    def snapshot(self) -> dict:
        with self._lock:
            data = {name: getattr(self, name) for name in self.FIELDS}
        data["physical_bytes_written"] = data["sst_bytes_written"] + data["page_bytes_written"]
        data["write_amplification"] = (
            data["physical_bytes_written"] / data["logical_bytes"] if data["logical_bytes"] else 0.0
        )
        return data


class SequenceCounter:
    """Thread-safe monotonically increasing sequence numbers starting at 1."""

    def __init__(self, last: int = 0) -> None:
        self._last = last
        self._lock = threading.Lock()

    def next(self) -> int:
        with self._lock:
            self._last += 1
            return self._last

    @property
    def last(self) -> int:
        return self._last


def sst_filename(table_id: int) -> str:
    return f"sst_{table_id}.aha"


class SSTable:
    """An immutable sorted run file with its metadata and a sparse in-memory index.

    Records are ordered by key with at most one record per key.  The checksum
    is verified when an existing file is opened and on every whole-body read.
    """

    __slots__ = (
        "id", "path", "min_key", "max_key", "entry_count", "byte_size",
        "body_end", "_index_keys", "_index_offs", "_mm", "_stats", "_crc",
        "__weakref__",
    )

    def __init__(self, table_id, path, min_key, max_key, entry_count, byte_size,
                 body_end, index_keys, index_offs, crc, stats=None):
        self.id = table_id
        self.path = path
        self.min_key = min_key
        self.max_key = max_key
        self.entry_count = entry_count
        self.byte_size = byte_size
        self.body_end = body_end
        self._index_keys = index_keys
        self._index_offs = index_offs
        self._crc = crc
        self._stats = stats
        self._mm = None

    def __repr__(self) -> str:
        return f"SSTable(id={self.id}, [{self.min_key!r}..{self.max_key!r}], n={self.entry_count})"

    @property
    def data_bytes(self) -> int:
        return self.body_end - len(_HEADER)

    # -- construction -------------------------------------------------------

    @classmethod
    def write(cls, directory: str, table_id: int, entries: Sequence[tuple],
              stats: Optional[IOStats] = None) -> "SSTable":
        """Write ``entries`` (sorted, unique keys) to ``sst_<id>.aha``."""
        if not entries:
            raise ValueError("cannot write an empty SSTable")
        parts = []
        extend = parts.extend
        u32 = _U32.pack
        tail = _TAIL.pack
        index_keys = []
        index_offs = []
        off = len(_HEADER)
        for i, (key, seq, kind, value) in enumerate(entries):
            if i % INDEX_INTERVAL == 0:
                index_keys.append(key)
                index_offs.append(off)
            klen = len(key)
            vlen = len(value)
            extend((u32(klen), key, tail(seq, kind, vlen), value))
            off += _RECORD_OVERHEAD + klen + vlen
        body = b"".join(parts)
        crc = zlib.crc32(body)
        min_key = entries[0][0]
        max_key = entries[-1][0]
        footer = b"".join((
            _U64.pack(len(entries)), u32(len(min_key)), min_key,
            u32(len(max_key)), max_key, u32(crc),
        ))
        path = os.path.join(directory, sst_filename(table_id))
        with open(path, "wb") as f:
            f.write(_HEADER)
            f.write(body)
            f.write(footer)
        size = len(_HEADER) + len(body) + len(footer)
        if stats is not None:
            stats.add("sst_bytes_written", size)
        return cls(table_id, path, min_key, max_key, len(entries), size,
                   len(_HEADER) + len(body), index_keys, index_offs, crc, stats)

    @classmethod
    def open(cls, path: str, table_id: int, stats: Optional[IOStats] = None) -> "SSTable":
        """Open an existing file, verifying structure and checksum."""
        with open(path, "rb") as f:
            buf = f.read()
        if len(buf) < len(_HEADER) or buf[:4] != SST_MAGIC:
            raise CorruptionError(f"{path}: bad SSTable header")
        (version,) = struct.unpack_from("<H", buf, 4)
        if version != SST_VERSION:
            raise CorruptionError(f"{path}: unsupported SSTable version {version}")
        off = len(_HEADER)
        count = 0
        index_keys = []
        index_offs = []
        footer = None
        try:
            while off < len(buf):
                footer = _parse_footer(buf, off, count)
                if footer is not None:
                    break
                if count % INDEX_INTERVAL == 0:
                    (klen,) = _U32.unpack_from(buf, off)
                    index_keys.append(buf[off + 4:off + 4 + klen])
                    index_offs.append(off)
                _, off = decode_records(buf, off, len(buf), 1)
                count += 1
        except struct.error as exc:
            raise CorruptionError(f"{path}: truncated record ({exc})") from None
        if footer is None:
            raise CorruptionError(f"{path}: missing footer")
        min_key, max_key, crc = footer
        if zlib.crc32(buf[len(_HEADER):off]) != crc:
            raise CorruptionError(f"{path}: checksum mismatch")
        if count < 1:
            raise CorruptionError(f"{path}: empty SSTable")
        return cls(table_id, path, min_key, max_key, count, len(buf), off,
                   index_keys, index_offs, crc, stats)

    # -- reading ------------------------------------------------------------

    def _buffer(self):
        mm = self._mm
        if mm is None:
            with _OPEN_LOCK:
                mm = self._mm
                if mm is None:
                    with open(self.path, "rb") as f:
                        mm = mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ)
                    self._mm = mm
        return mm

    def scan(self, lo: Optional[bytes] = None, hi: Optional[bytes] = None) -> list:
        """Entries with ``lo <= key < hi`` in key order."""
        if hi is not None and hi <= self.min_key:
            return []
        if lo is not None and lo > self.max_key:
            return []
        buf = self._buffer()
        if lo is None or lo <= self.min_key:
            off = len(_HEADER)
        else:
            i = bisect_right(self._index_keys, lo) - 1
            off = self._index_offs[i if i > 0 else 0]
        end = self.body_end
        out = []
        append = out.append
        u32 = _U32.unpack_from
        tail = _TAIL.unpack_from
        start = off
        while off < end:
            (klen,) = u32(buf, off)
            key = buf[off + 4:off + 4 + klen]
            if hi is not None and key >= hi:
                break
            off += 4 + klen
            seq, kind, vlen = tail(buf, off)
            off += 13
            if lo is None or key >= lo:
                append((key, seq, kind, buf[off:off + vlen]))
            off += vlen
        if self._stats is not None:
            self._stats.add("data_block_reads")
            self._stats.add("data_bytes_read", off - start)
        return out

    def read_all(self) -> list:
        """Decode the whole body, verifying the checksum."""
        buf = self._buffer()
        body = buf[len(_HEADER):self.body_end]
        if zlib.crc32(body) != self._crc:
            raise CorruptionError(f"{self.path}: checksum mismatch")
        out, _ = decode_records(body, 0, len(body))
        if self._stats is not None:
            self._stats.add("data_block_reads")
            self._stats.add("data_bytes_read", len(body))
        return out

    def close(self) -> None:
        mm = self._mm
        if mm is not None:
            self._mm = None
            mm.close()

    def delete(self) -> None:
        self.close()
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


def _parse_footer(buf, off: int, count: int):
    """Return (min_key, max_key, crc) if ``buf[off:]`` is exactly a footer for ``count`` records."""
    n = len(buf)
    if n - off < 8 + 4 + 1 + 4 + 1 + 4:
        return None
    (stored,) = _U64.unpack_from(buf, off)
    if stored != count:
        return None
    p = off + 8
    (lmin,) = _U32.unpack_from(buf, p)
    p += 4
    if not 1 <= lmin <= MAX_KEY_BYTES or p + lmin + 4 > n:
        return None
    min_key = buf[p:p + lmin]
    p += lmin
    (lmax,) = _U32.unpack_from(buf, p)
    p += 4
    if not 1 <= lmax <= MAX_KEY_BYTES or p + lmax + 4 != n:
        return None
    max_key = buf[p:p + lmax]
    (crc,) = _U32.unpack_from(buf, p + lmax)
    return bytes(min_key), bytes(max_key), crc


def merge_newest(sources: Sequence[Sequence[tuple]]) -> list:
    """Merge key-sorted entry lists, keeping the highest-seq entry per key."""
    if not sources:
        return []
    if len(sources) == 1:
        return list(sources[0])
    merged = []
    for src in sources:
        merged.extend(src)
    merged.sort(key=key_of)
    out = []
    append = out.append
    prev = None
    for e in merged:
        if e[0] == prev:
            if e[1] > out[-1][1]:
                out[-1] = e
        else:
            append(e)
            prev = e[0]
    return out


def live_items(entries: Iterable[tuple]) -> list:
    """``(key, value)`` pairs of non-tombstone entries."""
    return [(e[0], e[3]) for e in entries if e[2] == PUT]


def plan_cuts(entries: Sequence[tuple], guards: Sequence[bytes] = (),
              target_bytes: int = 2 << 20) -> list[tuple[int, int]]:
    """Slice bounds splitting sorted entries at every guard and at ``target_bytes``.

    No slice contains keys on both sides of a guard.
    """
    if not entries:
        return []
    guards = sorted(set(guards))
    gi = bisect_right(guards, entries[0][0])
    next_guard = guards[gi] if gi < len(guards) else None
    cuts = []
    start = 0
    size = 0
    for i, e in enumerate(entries):
        key = e[0]
        cut = False
        if next_guard is not None and key >= next_guard:
            gi = bisect_right(guards, key)
            next_guard = guards[gi] if gi < len(guards) else None
            cut = True
        esize = _RECORD_OVERHEAD + len(key) + len(e[3])
        if size and size + esize > target_bytes:
            cut = True
        if cut and i > start:
            cuts.append((start, i))
            start = i
            size = 0
        size += esize
    cuts.append((start, len(entries)))
    return cuts


class Reclaimer:
    """Epoch-based deferred reclamation of retired files and pages.

    Readers bracket each use of a view with :meth:`enter`/:meth:`exit`.  An
    object retired at epoch ``r`` is released once every active reader
    entered after ``r``.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._epoch = 0
        self._active: dict[int, int] = {}
        self._next_token = 0
        self._retired: list[tuple[int, Callable[[], None]]] = []

    def enter(self) -> int:
        with self._lock:
            token = self._next_token
            self._next_token += 1
            self._active[token] = self._epoch
            return token

    def exit(self, token: int) -> None:
        with self._lock:
            self._active.pop(token, None)
        if self._retired:
            self.reclaim()

    def retire(self, release: Callable[[], None]) -> None:
        with self._lock:
            self._retired.append((self._epoch, release))
            self._epoch += 1

    def reclaim(self) -> int:
        with self._lock:
            floor = min(self._active.values()) if self._active else self._epoch + 1
            ready = [r for e, r in self._retired if e < floor]
            self._retired = [(e, r) for e, r in self._retired if e >= floor]
        for release in ready:
            release()
        return len(ready)

    @property
    def pending(self) -> int:
        return len(self._retired)


class SSTableStore:
    """Allocates table ids, writes tables into the data directory and retires them."""

    def __init__(self, directory: str, stats: IOStats, reclaimer: Reclaimer,
                 next_id: int = 1) -> None:
        self.directory = directory
        self.stats = stats
        self.reclaimer = reclaimer
        self._next_id = next_id
        self._lock = threading.Lock()

    @property
    def next_id(self) -> int:
        return self._next_id

    def _allocate(self) -> int:
        with self._lock:
            tid = self._next_id
            self._next_id += 1
            return tid

    def write(self, entries: Sequence[tuple], category: str = "compaction") -> SSTable:
        table = SSTable.write(self.directory, self._allocate(), entries, self.stats)
        self.stats.add(f"{category}_bytes_written", table.byte_size)
        return table

    def write_split(self, entries: Sequence[tuple], guards: Sequence[bytes] = (),
                    target_bytes: int = 2 << 20, category: str = "compaction") -> list[SSTable]:
        """Write sorted entries as tables cut at every guard key and at ``target_bytes``."""
        return [self.write(entries[a:b], category)
                for a, b in plan_cuts(entries, guards, target_bytes)]

    def open(self, table_id: int) -> SSTable:
        with self._lock:
            self._next_id = max(self._next_id, table_id + 1)
        return SSTable.open(os.path.join(self.directory, sst_filename(table_id)), table_id,
                            self.stats)

    def retire(self, tables: Iterable[SSTable]) -> None:
        tables = list(tables)
        if not tables:
            return

        def release():
            for t in tables:
                t.delete()

        self.reclaimer.retire(release)


class PutResult(enum.Enum):
    ACCEPTED = "accepted"
    NEEDS_ROTATION = "needs_rotation"


class MemTable:
    """In-memory ordered write buffer; keeps only the newest entry per key.

    ``nbytes`` is the encoded size of the retained entries, i.e. exactly the
    body size of the SSTable a flush would produce.
    """

    def __init__(self, byte_budget: int = 4 << 20, counter: Optional[SequenceCounter] = None):
        self.byte_budget = byte_budget
        self.counter = counter if counter is not None else SequenceCounter()
        self.entries: SortedDict = SortedDict()
        self.nbytes = 0
        self.mutable = True
        self.lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.entries)

    def put(self, key: bytes, kind: int, value: bytes = b"") -> PutResult:
        check_entry(key, value)
        if kind == TOMBSTONE and value:
            raise InputError("tombstones carry no value")
        size = _RECORD_OVERHEAD + len(key) + len(value)
        with self.lock:
            if not self.mutable:
                return PutResult.NEEDS_ROTATION
            old = self.entries.get(key)
            grown = self.nbytes + size - (encoded_size(old[0], old[3]) if old is not None else 0)
            if grown > self.byte_budget and self.entries:
                return PutResult.NEEDS_ROTATION
            self.entries[key] = Entry(bytes(key), self.counter.next(), int(kind), bytes(value))
            self.nbytes = grown
        return PutResult.ACCEPTED

    def freeze(self) -> None:
        with self.lock:
            self.mutable = False

    def get(self, key: bytes):
        with self.lock:
            return self.entries.get(key)

    def range(self, lo: Optional[bytes], hi: Optional[bytes]) -> list:
        ents = self.entries
        if self.mutable:
            with self.lock:
                return [ents[k] for k in ents.irange(lo, hi, inclusive=(True, False))]
        return [ents[k] for k in ents.irange(lo, hi, inclusive=(True, False))]

    def has_key_in(self, lo: Optional[bytes], hi: Optional[bytes]) -> bool:
        with self.lock:
            for _ in self.entries.irange(lo, hi, inclusive=(True, False)):
                return True
        return False

    def sorted_entries(self) -> list:
        with self.lock:
            return list(self.entries.values())


def flush_memtable(imm: MemTable, store: SSTableStore) -> Optional[SSTable]:
    """Write a frozen MemTable as one SSTable; empty MemTables produce nothing."""
    if imm.mutable:
        raise ValueError("only an immutable MemTable can be flushed")
    entries = imm.sorted_entries()
    if not entries:
        return None
    return store.write(entries, "flush")


class Frame:
    __slots__ = ("page_id", "obj", "pin_count", "dirty")

    def __init__(self, page_id: int, obj) -> None:
        self.page_id = page_id
        self.obj = obj
        self.pin_count = 0
        self.dirty = False


def _raw_encode(obj: bytes, page_size: int) -> bytes:
    return bytes(obj)


def _raw_decode(data: bytes):
    return data


def _one_slot(head: bytes) -> int:
    return 1


class PageBufferPool:
    """Fixed-capacity LRU cache of pages backed by one file (``page_id * page_size``).

    Frames hold decoded page objects; ``encode``/``decode`` convert to and from
    the on-disk page image.  Pinned frames are never evicted and dirty victims
    are written back before their frame is reused.  An image may span several
    consecutive slots; ``slots_of`` reads the slot count from the first slot.
    """

    def __init__(self, path: str, page_size: int = 4096, capacity: int = 4096,
                 encode: Callable = _raw_encode, decode: Callable = _raw_decode,
                 stats: Optional[IOStats] = None, next_page_id: int = 0,
                 slots_of: Callable[[bytes], int] = _one_slot) -> None:
        if capacity < 1:
            raise ValueError("pool capacity must be positive")
        self.path = path
        self.page_size = page_size
        self.capacity = capacity
        self._encode = encode
        self._decode = decode
        self._slots_of = slots_of
        self.stats = stats if stats is not None else IOStats()
        self._frames: OrderedDict[int, Frame] = OrderedDict()
        self._lock = threading.RLock()
        self._fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
        self._next_page_id = next_page_id
        self._free: list[int] = []

    @property
    def next_page_id(self) -> int:
        return self._next_page_id

    @property
    def free_ids(self) -> list[int]:
        return list(self._free)

    def set_free_ids(self, ids: Iterable[int]) -> None:
        self._free = sorted(set(ids))

    def __len__(self) -> int:
        return len(self._frames)

    def resident(self) -> list[int]:
        """Resident page ids, least recently used first."""
        with self._lock:
            return list(self._frames)

    def allocate(self, nslots: int = 1) -> int:
        """A free page id; ``nslots > 1`` reserves consecutive slots."""
        with self._lock:
            if nslots == 1 and self._free:
                return self._free.pop()
            pid = self._next_page_id
            self._next_page_id += nslots
            return pid

    def _write_back(self, frame: Frame) -> None:
        image = self._encode(frame.obj, self.page_size)
        slots = max(1, -(-len(image) // self.page_size))
        image = image.ljust(slots * self.page_size, b"\0")
        os.pwrite(self._fd, image, frame.page_id * self.page_size)
        frame.dirty = False
        self.stats.add("page_writes")
        self.stats.add("page_bytes_written", len(image))

    def _make_room(self) -> None:
        while len(self._frames) >= self.capacity:
            for pid, frame in self._frames.items():
                if frame.pin_count == 0:
                    break
            else:
                raise PoolExhaustedError(f"all {self.capacity} frames are pinned")
            if frame.dirty:
                self._write_back(frame)
            del self._frames[pid]

    def fetch(self, page_id: int) -> Frame:
        """Return the page's frame pinned; the caller must :meth:`unpin` it."""
        with self._lock:
            frame = self._frames.get(page_id)
            if frame is None:
                self._make_room()
                data = os.pread(self._fd, self.page_size, page_id * self.page_size)
                if len(data) < self.page_size:
                    data = data.ljust(self.page_size, b"\0")
                slots = self._slots_of(data)
                if slots > 1:
                    data = os.pread(self._fd, slots * self.page_size, page_id * self.page_size)
                self.stats.add("page_reads")
                frame = Frame(page_id, self._decode(data))
                self._frames[page_id] = frame
            else:
                self._frames.move_to_end(page_id)
            frame.pin_count += 1
            return frame

    def unpin(self, page_id: int, dirty: bool = False) -> None:
        with self._lock:
            frame = self._frames[page_id]
            if frame.pin_count <= 0:
                raise ValueError(f"page {page_id} is not pinned")
            frame.pin_count -= 1
            if dirty:
                frame.dirty = True

    def read(self, page_id: int):
        """Fetch, take the decoded object, unpin."""
        with self._lock:
            frame = self.fetch(page_id)
            frame.pin_count -= 1
            return frame.obj

    def write(self, page_id: int, obj) -> None:
        """Replace a page's contents without reading its old image."""
        with self._lock:
            frame = self._frames.get(page_id)
            if frame is None:
                self._make_room()
                frame = Frame(page_id, obj)
                self._frames[page_id] = frame
            else:
                frame.obj = obj
                self._frames.move_to_end(page_id)
            frame.dirty = True

    def free(self, page_id: int, nslots: int = 1) -> None:
        """Drop a page and make its slot ids reusable."""
        with self._lock:
            frame = self._frames.get(page_id)
            if frame is not None and frame.pin_count:
                raise ValueError(f"cannot free pinned page {page_id}")
            self._frames.pop(page_id, None)
            self._free.extend(range(page_id, page_id + nslots))

    def flush_all(self) -> None:
        with self._lock:
            for frame in self._frames.values():
                if frame.dirty:
                    self._write_back(frame)

    def close(self) -> None:
        self.flush_all()
        os.close(self._fd)
