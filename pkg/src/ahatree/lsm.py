"""Per-node leveled LSM (NodeLsm) with guarded compaction and overflow detection.

A NodeLsm is an immutable value.  Every mutation returns a new version that
shares the untouched runs and tables with its predecessor; the engine installs
versions atomically, so a reader holding an old version never sees a partial
change.

Layout:

* ``l1``: overlapping runs in arrival order (oldest first).
* ``deep``: one disjoint run per level, ``deep[0]`` is L2.
* ``frozen``: runs pushed below the level limit of the root, waiting for the
  tree-maintenance role to hand them to the tree (oldest first).
"""

from __future__ import annotations

import enum
import itertools
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from .storage import SSTable, SSTableStore, merge_newest

UNBOUNDED_LEVELS = 64


class Run:
    """A sorted sequence of SSTables with pairwise disjoint key spans."""

    __slots__ = ("tables", "min_keys", "max_keys", "nbytes")

    def __init__(self, tables: Iterable[SSTable] = ()) -> None:
        tables = tuple(sorted(tables, key=lambda t: t.min_key))
        self.tables = tables
        self.min_keys = [t.min_key for t in tables]
        self.max_keys = [t.max_key for t in tables]
        self.nbytes = sum(t.byte_size for t in tables)
        for a, b in zip(tables, tables[1:]):
            if a.max_key >= b.min_key:
                raise ValueError(f"overlapping tables in one run: {a!r} {b!r}")

    def __len__(self) -> int:
        return len(self.tables)

    def __bool__(self) -> bool:
        return bool(self.tables)

    def __iter__(self):
        return iter(self.tables)

    def __repr__(self) -> str:
        return f"Run({[t.id for t in self.tables]})"

    def span(self) -> tuple[bytes, bytes]:
        return self.min_keys[0], self.max_keys[-1]

    def bounds(self, lo: Optional[bytes], hi: Optional[bytes]) -> tuple[int, int]:
        """Index slice of the tables whose span meets ``[lo, hi)``."""
        i = 0 if lo is None else bisect_left(self.max_keys, lo)
        j = len(self.tables) if hi is None else bisect_left(self.min_keys, hi)
        return i, j

    def overlapping(self, lo: Optional[bytes], hi: Optional[bytes]) -> tuple:
        i, j = self.bounds(lo, hi)
        return self.tables[i:j] if i < j else ()

    def overlaps(self, lo: Optional[bytes], hi: Optional[bytes]) -> bool:
        i, j = self.bounds(lo, hi)
        return i < j

    def overlapping_span(self, min_key: bytes, max_key: bytes) -> tuple:
        """Tables meeting the closed span ``[min_key, max_key]``."""
        i = bisect_left(self.max_keys, min_key)
        j = bisect_right(self.min_keys, max_key)
        return self.tables[i:j] if i < j else ()

    def without(self, removed: set) -> "Run":
        return Run(t for t in self.tables if id(t) not in removed)

    def plus(self, added: Iterable[SSTable]) -> "Run":
        return Run(self.tables + tuple(added))


EMPTY_RUN = Run()


@dataclass(frozen=True)
class LevelPolicy:
    """Compaction triggers: L1 by run count, deeper levels by byte capacity."""

    l1_run_trigger: int = 4
    size_ratio: int = 10
    base_level_bytes: int = 10 << 20
    sstable_target: int = 2 << 20

    def __post_init__(self) -> None:
        if self.size_ratio < 2:
            raise ValueError("size_ratio must be at least 2")
        if self.l1_run_trigger < 2:
            raise ValueError("l1_run_trigger must be at least 2")

    def capacity(self, level: int) -> int:
        """Byte capacity of level ``level`` (2-based; L1 is bounded by run count)."""
        return self.base_level_bytes * self.size_ratio ** (level - 2)


class Overflow(enum.Enum):
    NONE = "none"
    HARD = "hard"
    SOFT = "soft"


def spans_guard(table: SSTable, guards: Sequence[bytes]) -> bool:
    """Whether some guard g satisfies ``min_key < g <= max_key``."""
    return bisect_right(guards, table.min_key) != bisect_right(guards, table.max_key)


def is_aligned(tables: Iterable[SSTable], guards: Sequence[bytes]) -> bool:
    return not any(spans_guard(t, guards) for t in tables)


_version_counter = itertools.count(1)


@dataclass(frozen=True, eq=False)
class NodeLsm:
    max_levels: int = 2
    l1: tuple = ()
    deep: tuple = ()
    frozen: tuple = ()
    guards_version: Optional[int] = None
    version_tag: int = 0
    compact_ptrs: tuple = ()
    cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.max_levels < 1:
            raise ValueError("max_levels must be at least 1")

    # -- shape ----------------------------------------------------------------

    def runs_newest_first(self) -> list[Run]:
        """Non-empty runs ordered from freshest to oldest."""
        runs = self.cache.get("runs")
        if runs is None:
            out = list(reversed(self.l1))
            out.extend(self.deep)
            out.extend(reversed(self.frozen))
            runs = [r for r in out if r]
            self.cache["runs"] = runs
        return runs

    def levels(self) -> list[list[Run]]:
        """Levels top to bottom; each level is a list of runs (newest first)."""
        out = [list(reversed(self.l1))]
        out.extend([r] for r in self.deep)
        out.extend([r] for r in reversed(self.frozen))
        return out

    @property
    def level_count(self) -> int:
        """Number of non-empty levels, counting L1 if any run is present."""
        n = 1 if self.l1 else 0
        last = 0
        for i, r in enumerate(self.deep):
            if r:
                last = i + 2
        n = max(n, last)
        if self.frozen:
            n = max(n, self.max_levels) + len(self.frozen)
        return n

    def tables(self) -> list[SSTable]:
        out = []
        for r in self.runs_newest_first():
            out.extend(r.tables)
        return out

    @property
    def table_count(self) -> int:
        return sum(len(r) for r in self.runs_newest_first())

    @property
    def nbytes(self) -> int:
        return sum(r.nbytes for r in self.runs_newest_first())

    def is_empty(self) -> bool:
        return not self.runs_newest_first()

    def overlaps(self, lo: Optional[bytes], hi: Optional[bytes]) -> bool:
        for r in self.runs_newest_first():
            if r.overlaps(lo, hi):
                return True
        return False

    def key_span(self) -> Optional[tuple[bytes, bytes]]:
        runs = self.runs_newest_first()
        if not runs:
            return None
        return min(r.min_keys[0] for r in runs), max(r.max_keys[-1] for r in runs)

    # -- versioning -------------------------------------------------------------

    def evolve(self, **changes) -> "NodeLsm":
        changes.setdefault("version_tag", next(_version_counter))
        changes.setdefault("cache", {})
        return replace(self, **changes)

    def add_runs(self, runs: Iterable[Run]) -> "NodeLsm":
        """New version with ``runs`` appended to L1 (they are the freshest data)."""
        runs = tuple(r for r in runs if r)
        if not runs:
            return self
        if self.frozen or any(self.deep):
            return self.evolve(l1=self.l1 + runs)
        # L1 is what migrates next, and the new runs were not cut at this node's guards
        return self.evolve(l1=self.l1 + runs, guards_version=None)

    def rebase(self, snapshot: "NodeLsm", current: "NodeLsm") -> "NodeLsm":
        """Carry L1 runs added to ``current`` after ``snapshot`` into this version.

        ``self`` was derived from ``snapshot`` while new runs kept arriving;
        only appends to L1 may have happened in between.
        """
        if current is snapshot:
            return self
        n = len(snapshot.l1)
        if current.l1[:n] != snapshot.l1 or current.deep != snapshot.deep \
                or current.frozen != snapshot.frozen:
            raise RuntimeError("concurrent NodeLsm modification beyond L1 appends")
        extra = current.l1[n:]
        if not extra:
            return self
        return self.evolve(l1=self.l1 + extra)

    def replace_tables(self, replacements: dict) -> "NodeLsm":
        """Swap tables in place: ``{id(old): [new tables]}`` (possibly empty)."""

        def fix(run: Run) -> Run:
            if not any(id(t) in replacements for t in run.tables):
                return run
            out = []
            for t in run.tables:
                out.extend(replacements.get(id(t), (t,)))
            return Run(out)

        l1 = tuple(r for r in (fix(r) for r in self.l1) if r)
        deep = tuple(fix(r) for r in self.deep)
        frozen = tuple(r for r in (fix(r) for r in self.frozen) if r)
        return self.evolve(l1=l1, deep=deep, frozen=frozen)

    # -- reads ------------------------------------------------------------------

    def scan_sources(self, lo: Optional[bytes], hi: Optional[bytes]) -> list[SSTable]:
        """Tables that may hold keys in ``[lo, hi)``, freshest run first."""
        out = []
        for r in self.runs_newest_first():
            out.extend(r.overlapping(lo, hi))
        return out

    def range_iter(self, lo: Optional[bytes], hi: Optional[bytes]) -> list:
        """Newest-wins merged entries in ``[lo, hi)``; tombstones are kept."""
        return merge_newest([t.scan(lo, hi) for t in self.scan_sources(lo, hi)])

    # -- overflow ---------------------------------------------------------------

    def bottom_over_capacity(self, policy: LevelPolicy) -> bool:
        if self.max_levels == 1:
            return len(self.l1) >= policy.l1_run_trigger
        if len(self.deep) < self.max_levels - 1:
            return False
        return self.deep[self.max_levels - 2].nbytes > policy.capacity(self.max_levels)

    def overflow(self, policy: LevelPolicy, is_root: bool = False) -> Overflow:
        """Whether data would have to go below the level limit.

        The root is allowed to exceed its limit (frozen runs pending hand-off):
        its overflow is soft.  Any other node overflows hard.
        """
        if self.frozen:
            return Overflow.SOFT if is_root else Overflow.HARD
        if self.bottom_over_capacity(policy):
            return Overflow.SOFT if is_root else Overflow.HARD
        return Overflow.NONE

    def freeze_bottom(self) -> "NodeLsm":
        """Move the bottom level below the limit, leaving it for the tree to take."""
        if self.max_levels == 1:
            if not self.l1:
                return self
            return self.evolve(l1=(), frozen=self.frozen + self.l1)
        i = self.max_levels - 2
        if len(self.deep) <= i or not self.deep[i]:
            return self
        deep = self.deep[:i] + (EMPTY_RUN,) + self.deep[i + 1:]
        return self.evolve(deep=deep, frozen=self.frozen + (self.deep[i],))

    def extract_bottom(self) -> tuple[list[Run], "NodeLsm"]:
        """Split off the bottom for migration to children.

        Frozen runs take priority (oldest only); otherwise the deepest
        non-empty level, which for a single-level LSM is every L1 run.
        Returned runs are ordered oldest first.
        """
        if self.frozen:
            return [self.frozen[0]], self.evolve(frozen=self.frozen[1:])
        for i in range(len(self.deep) - 1, -1, -1):
            if self.deep[i]:
                deep = self.deep[:i] + (EMPTY_RUN,) + self.deep[i + 1:]
                return [self.deep[i]], self.evolve(deep=deep)
        if self.l1:
            return list(self.l1), self.evolve(l1=())
        return [], self

    def extract_oldest_bottom_run(self) -> tuple[Optional[Run], "NodeLsm"]:
        """The oldest run of the deepest non-empty level, and the remainder."""
        if self.frozen:
            return self.frozen[0], self.evolve(frozen=self.frozen[1:])
        for i in range(len(self.deep) - 1, -1, -1):
            if self.deep[i]:
                deep = self.deep[:i] + (EMPTY_RUN,) + self.deep[i + 1:]
                return self.deep[i], self.evolve(deep=deep)
        if self.l1:
            return self.l1[0], self.evolve(l1=self.l1[1:])
        return None, self

    # -- compaction -------------------------------------------------------------

    def compaction_score(self, policy: LevelPolicy) -> tuple[float, int]:
        """Best (score, level) with level 1 for L1 and i >= 2 for deep levels."""
        best = (0.0, 0)
        if self.max_levels >= 2 and self.l1:
            best = (len(self.l1) / policy.l1_run_trigger, 1)
        # the bottom level is never compacted downwards; it overflows instead
        for i, r in enumerate(self.deep):
            level = i + 2
            if level >= self.max_levels or not r:
                continue
            score = r.nbytes / policy.capacity(level)
            if score > best[0]:
                best = (score, level)
        return best

    def needs_compaction(self, policy: LevelPolicy) -> bool:
        return self.compaction_score(policy)[0] >= 1.0


@dataclass
class CompactionResult:
    lsm: NodeLsm
    inputs: list
    outputs: list
    moved: list


def _set_level(deep: tuple, i: int, run: Run) -> tuple:
    if i < len(deep):
        return deep[:i] + (run,) + deep[i + 1:]
    return deep + (EMPTY_RUN,) * (i - len(deep)) + (run,)


def stamp_guards(lsm: NodeLsm, guards: Sequence[bytes], guards_version: Optional[int]) -> NodeLsm:
    """Record ``guards_version`` only if the runs the next node_empty moves avoid every guard."""
    runs, _ = lsm.extract_bottom()
    aligned = is_aligned((t for r in runs for t in r.tables), guards)
    return replace(lsm, guards_version=guards_version if aligned else None)


def compact_once(lsm: NodeLsm, policy: LevelPolicy, store: SSTableStore,
                 guards: Sequence[bytes] = (), guards_version: Optional[int] = None,
                 category: str = "compaction") -> Optional[CompactionResult]:
    """Run one internal compaction unit, or return None when nothing is due.

    Outputs are cut at every guard, so no output table spans a guard key.
    Newest-wins deduplication only; tombstones are retained.
    """
    score, level = lsm.compaction_score(policy)
    if score < 1.0:
        return None
    guards = sorted(set(guards))
    if level == 1:
        l1_tables = [t for r in lsm.l1 for t in r.tables]
        lo = min(t.min_key for t in l1_tables)
        hi = max(t.max_key for t in l1_tables)
        target = lsm.deep[0] if lsm.deep else EMPTY_RUN
        overlap = list(target.overlapping_span(lo, hi))
        sources = [t.read_all() for t in overlap]
        sources += [t.read_all() for r in lsm.l1 for t in r.tables]
        merged = merge_newest(sources)
        outputs = store.write_split(merged, guards, policy.sstable_target, category)
        removed = {id(t) for t in overlap}
        new_run = target.without(removed).plus(outputs)
        new = lsm.evolve(l1=(), deep=_set_level(lsm.deep, 0, new_run))
        new = stamp_guards(new, guards, guards_version)
        return CompactionResult(new, overlap + l1_tables, outputs, [])

    i = level - 2
    run = lsm.deep[i]
    ptrs = dict(lsm.compact_ptrs)
    ptr = ptrs.get(level)
    k = 0 if ptr is None else bisect_right(run.min_keys, ptr)
    if k >= len(run):
        k = 0
    table = run.tables[k]
    ptrs[level] = table.min_key
    nxt = lsm.deep[i + 1] if i + 1 < len(lsm.deep) else EMPTY_RUN
    overlap = list(nxt.overlapping_span(table.min_key, table.max_key))
    src_run = run.without({id(table)})
    if not overlap and not spans_guard(table, guards):
        deep = _set_level(lsm.deep, i, src_run)
        deep = _set_level(deep, i + 1, nxt.plus([table]))
        new = lsm.evolve(deep=deep, compact_ptrs=tuple(sorted(ptrs.items())))
        new = stamp_guards(new, guards, guards_version)
        return CompactionResult(new, [], [], [table])
    merged = merge_newest([t.read_all() for t in overlap] + [table.read_all()])
    outputs = store.write_split(merged, guards, policy.sstable_target, category)
    deep = _set_level(lsm.deep, i, src_run)
    deep = _set_level(deep, i + 1, nxt.without({id(t) for t in overlap}).plus(outputs))
    new = lsm.evolve(deep=deep, compact_ptrs=tuple(sorted(ptrs.items())))
    new = stamp_guards(new, guards, guards_version)
    return CompactionResult(new, overlap + [table], outputs, [])


def merge_all(lsm: NodeLsm) -> list:
    """Every entry of the LSM, newest-wins, key-sorted (tombstones kept)."""
    return merge_newest([t.read_all() for t in lsm.tables()])


def single_bottom(tables: Sequence[SSTable], max_levels: int) -> NodeLsm:
    """A fresh NodeLsm holding ``tables`` (disjoint) at its bottom level."""
    run = Run(tables)
    if max_levels == 1:
        return NodeLsm(max_levels=1, l1=(run,) if run else ())
    deep = (EMPTY_RUN,) * (max_levels - 2) + (run,)
    return NodeLsm(max_levels=max_levels, deep=deep)
