"""Hotspot bookkeeping, the adaptation queue and the engine state machine."""

from __future__ import annotations

import enum
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Optional

from .lsm import NodeLsm
from .storage import InputError
from .tree import Node


class EngineState(enum.Enum):
    W0 = "W0"
    R = "R"
    WPLUS = "WPlus"


class Signal(enum.Enum):
    READ_HEAVY = "read_heavy"
    WRITE_HEAVY = "write_heavy"


class LeafStrategy(enum.Enum):
    DOWN_SPLIT = "down"
    SIDE_SPLIT = "side"


@dataclass(frozen=True)
class HotspotSet:
    """Sorted, pairwise disjoint half-open key ranges with a version number."""

    ranges: tuple = ()
    version: int = 0

    @classmethod
    def build(cls, ranges: Iterable[tuple], version: int) -> "HotspotSet":
        rs = []
        for lo, hi in ranges:
            if lo is not None and hi is not None and lo >= hi:
                raise InputError(f"empty hotspot range {lo!r}..{hi!r}")
            rs.append((lo, hi))
        rs.sort(key=lambda r: (r[0] is not None, r[0] or b""))
        for (alo, ahi), (blo, bhi) in zip(rs, rs[1:]):
            if ahi is None or (blo is not None and blo < ahi):
                raise InputError("hotspot ranges overlap")
        return cls(tuple(rs), version)

    def __bool__(self) -> bool:
        return bool(self.ranges)

    @property
    def bounds(self) -> list[bytes]:
        return sorted({b for r in self.ranges for b in r if b is not None})

    def contains(self, key: bytes) -> bool:
        for lo, hi in self.ranges:
            if (lo is None or key >= lo) and (hi is None or key < hi):
                return True
        return False

    def intersects(self, lo: Optional[bytes], hi: Optional[bytes]) -> bool:
        for hlo, hhi in self.ranges:
            if (hhi is None or lo is None or lo < hhi) and (hlo is None or hi is None or hlo < hi):
                return True
        return False

    def covers(self, lo: bytes, hi: Optional[bytes]) -> bool:
        """Whether ``[lo, hi)`` lies inside a single hotspot range."""
        for hlo, hhi in self.ranges:
            if (hlo is None or lo >= hlo) and (hhi is None or (hi is not None and hi <= hhi)):
                return True
        return False


def lsm_touches_hot(lsm: Optional[NodeLsm], hs: HotspotSet) -> bool:
    """Whether any table span of ``lsm`` meets a hotspot range (cached per version)."""
    if lsm is None or not hs:
        return False
    cached = lsm.cache.get("hot")
    if cached is not None and cached[0] == hs.version:
        return cached[1]
    result = any(lsm.overlaps(lo, hi) for lo, hi in hs.ranges)
    lsm.cache["hot"] = (hs.version, result)
    return result


def hotspot_free(node: Node, hs: HotspotSet) -> bool:
    return not lsm_touches_hot(node.lsm, hs)


def leaf_adapted(node: Node) -> bool:
    return node.is_page_leaf


def needs_adapt(node: Node, hs: HotspotSet) -> bool:
    """Whether ``node`` still blocks the read-optimized state for ``hs``."""
    if not hs.intersects(node.lo, node.hi):
        return False
    if node.leaf:
        return not node.is_page_leaf
    return lsm_touches_hot(node.lsm, hs)


def pending_nodes(root: Node, hs: HotspotSet) -> list[Node]:
    """Every node on a hotspot path that is not yet adapted."""
    out = []
    if not hs:
        return out
    stack = [root]
    while stack:
        node = stack.pop()
        if not hs.intersects(node.lo, node.hi):
            continue
        if needs_adapt(node, hs):
            out.append(node)
        if not node.leaf:
            for lo, hi in hs.ranges:
                for i in node.child_span(lo, hi):
                    stack.append(node.children[i])
    # a child may be pushed once per hotspot range it meets
    seen = set()
    uniq = []
    for n in out:
        if id(n) not in seen:
            seen.add(id(n))
            uniq.append(n)
    return uniq


class AdaptQueue:
    """Deduplicated FIFO of ``(node_id, lo)`` produced by queries, consumed by the tree role."""

    def __init__(self) -> None:
        self._items: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.in_progress: Optional[int] = None
        self.enqueued = 0
        self.redundant = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, node_id: int, lo: Optional[bytes], front: bool = False,
             requeue: bool = False) -> bool:
        """``requeue`` admits the node being processed (follow-up work on its new version)."""
        with self._lock:
            if node_id in self._items or (node_id == self.in_progress and not requeue):
                self.redundant += 1
                return False
            self._items[node_id] = lo
            if front:
                self._items.move_to_end(node_id, last=False)
            self.enqueued += 1
            return True

    def pop(self) -> Optional[tuple[int, Optional[bytes]]]:
        with self._lock:
            if not self._items:
                return None
            item = self._items.popitem(last=False)
            self.in_progress = item[0]
            return item

    def done(self) -> None:
        with self._lock:
            self.in_progress = None

    def clear(self) -> None:
        with self._lock:
            self._items.clear()


def observe_query(nodes: Iterable[Node], lo: Optional[bytes], hi: Optional[bytes],
                  hs: HotspotSet, queue: AdaptQueue) -> int:
    """Enqueue every traversed node that still blocks R; returns how many were new."""
    if not hs:
        return 0
    added = 0
    for n in nodes:
        if needs_adapt(n, hs) and queue.push(n.id, n.lo):
            added += 1
    return added


class StateMachine:
    """Tracks the workload phase and whether adaptation for the current hotspots finished.

    ``state`` is R only while the phase is read-heavy and adaptation is complete
    for the current hotspot version; otherwise it is the write-optimized base
    state (W0 until R is first reached, WPlus afterwards).
    """

    def __init__(self, base: EngineState = EngineState.W0) -> None:
        self.base = base
        self.phase = Signal.WRITE_HEAVY
        self.complete_version: Optional[int] = None
        self.adaptations = 0

    def state(self, hs_version: int) -> EngineState:
        if self.phase is Signal.READ_HEAVY and self.complete_version == hs_version:
            return EngineState.R
        return self.base

    def adapting(self, hs_version: int) -> bool:
        return self.phase is Signal.READ_HEAVY and self.complete_version != hs_version

    def signal(self, sig: Signal) -> None:
        if sig is Signal.WRITE_HEAVY:
            self.complete_version = None
        self.phase = sig

    def mark_complete(self, hs_version: int) -> None:
        # once R has been reached, every later write-optimized state is WPlus
        self.complete_version = hs_version
        self.base = EngineState.WPLUS
        self.adaptations += 1


def parse_strategy(value) -> LeafStrategy:
    if isinstance(value, LeafStrategy):
        return value
    return LeafStrategy(value)
