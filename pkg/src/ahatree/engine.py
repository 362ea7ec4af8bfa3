"""The index facade: writes, merged reads, background maintenance and persistence."""

from __future__ import annotations

import enum
import glob
import itertools
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional, Sequence

from .adapt import (
    AdaptQueue, EngineState, HotspotSet, LeafStrategy, Signal, StateMachine,
    needs_adapt, observe_query, parse_strategy, pending_nodes,
)
from .lsm import UNBOUNDED_LEVELS, LevelPolicy, NodeLsm, Run, compact_once
from .storage import (
    PUT, TOMBSTONE, AhaError, InputError, IOStats, MemTable, PageBufferPool, PutResult,
    Reclaimer, SequenceCounter, SSTableStore, check_entry, encoded_size, merge_newest,
)
from .tree import (
    Change, Node, TreeOps, audit_freshness, audit_structure, decode_page, encode_page,
    find_path, height, iter_nodes, leaf_path, max_depth, page_slots, read_manifest,
    splice, write_manifest,
)

log = logging.getLogger(__name__)

MANIFEST = "MANIFEST.aha"
PAGES = "pages.aha"


class Mode(enum.Enum):
    AHA = "aha"
    PURE_LSM = "pure-lsm"
    PURE_BTREE = "pure-btree"


@dataclass
class EngineConfig:
    data_dir: str
    mode: Mode = Mode.AHA
    root_max_levels: int = 3
    node_max_levels: int = 2
    memtable_budget: int = 4 << 20
    sstable_target: int = 2 << 20
    page_size: int = 4096
    pool_pages: int = 4096
    leaf_strategy: LeafStrategy = LeafStrategy.DOWN_SPLIT
    l1_run_trigger: int = 4
    # flushes wait behind root compaction once L1 holds this many runs (write backpressure)
    l1_stop_runs: int = 12
    size_ratio: int = 10
    base_level_bytes: int = 10 << 20
    fanout: int = 256
    chain_pages: int = 16
    background: bool = True
    put_wait_timeout: float = 120.0
    # synchronous mode only: maintenance units run after each query while adapting
    units_per_query: Optional[int] = None

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        self.leaf_strategy = parse_strategy(self.leaf_strategy)
        if self.root_max_levels < 1 or self.node_max_levels < 1:
            raise InputError("level limits must be at least 1")
        if self.page_size < 64:
            raise InputError("page size too small")
        if self.l1_stop_runs < self.l1_run_trigger:
            raise InputError("l1_stop_runs must be at least l1_run_trigger")

    def policy(self) -> LevelPolicy:
        return LevelPolicy(self.l1_run_trigger, self.size_ratio, self.base_level_bytes,
                           self.sstable_target)


@dataclass
class QueryStats:
    nodelsm_probes: int = 0
    sstables_touched: int = 0
    pages_read: int = 0
    entries_emitted: int = 0


class View(NamedTuple):
    mem: Optional[MemTable]
    imm: Optional[MemTable]
    root: Node


_SST_RE = re.compile(r"sst_(\d+)\.aha$")


class AhaEngine:
    """Adaptive index engine.

    Readers never take locks: they pin an epoch, read the current immutable
    view and merge every source newest-wins.  Two maintenance roles change
    structure: the root role flushes MemTables and compacts the root LSM, the
    tree role moves data down the tree, splits nodes and adapts hotspots.

    Lock order: tree lock, then root lock, then admission lock, then view lock.
    """

    def __init__(self, config: EngineConfig) -> None:
        self.config = config
        self.mode = config.mode
        self.policy = config.policy()
        self.io = IOStats()
        self.reclaimer = Reclaimer()
        os.makedirs(config.data_dir, exist_ok=True)
        self.store = SSTableStore(config.data_dir, self.io, self.reclaimer)
        self.pool = PageBufferPool(os.path.join(config.data_dir, PAGES), config.page_size,
                                   config.pool_pages, encode_page, decode_page, self.io,
                                   slots_of=page_slots)
        self.ops = TreeOps(self.store, self.pool, self.policy, self.io,
                           self.root_levels, config.node_max_levels, config.fanout,
                           config.chain_pages)
        self.seq = SequenceCounter()
        self.hs = HotspotSet()
        self.sm = StateMachine()
        self.adapt_q = AdaptQueue()
        self.tree_q = AdaptQueue()
        self._view_lock = threading.Lock()
        self._tree_lock = threading.RLock()
        self._root_busy = threading.RLock()
        self._admit = threading.RLock()
        self._cv = threading.Condition()
        self._generation = 0
        self._checked_generation = -1
        self._stop = False
        self._threads: list[threading.Thread] = []
        self._errors: list[BaseException] = []
        self.on_unit: Optional[Callable[[str], None]] = None
        self.fault_hook: Optional[Callable[[str], bool]] = None
        self.units = {"flush": 0, "root_compaction": 0, "freeze": 0, "tree": 0, "adapt": 0}
        self.adapt_log: list[tuple[str, float]] = []
        self._closed = False
        self._view = View(None, None, Node(0, None, None, True))

    # -- lifecycle ------------------------------------------------------------------

    @property
    def root_levels(self) -> int:
        return UNBOUNDED_LEVELS if self.mode is Mode.PURE_LSM else self.config.root_max_levels

    @classmethod
    def open(cls, config: EngineConfig) -> "AhaEngine":
        eng = cls(config)
        path = os.path.join(config.data_dir, MANIFEST)
        if os.path.exists(path):
            eng._load(path)
        else:
            eng._fresh()
        eng._start()
        return eng

    def _new_memtable(self) -> Optional[MemTable]:
        if self.mode is Mode.PURE_BTREE:
            return None
        return MemTable(self.config.memtable_budget, self.seq)

    def _fresh(self) -> None:
        if self.mode is Mode.PURE_BTREE:
            root = Node(0, None, None, True)
        else:
            root = Node(0, None, None, True, lsm=NodeLsm(max_levels=self.root_levels))
        self._view = View(self._new_memtable(), None, root)

    def _load(self, path: str) -> None:
        header, root = read_manifest(path, self.store.open)
        if header.get("mode") != self.mode.value:
            raise AhaError(f"{path}: data directory belongs to mode {header.get('mode')!r}")
        self.seq = SequenceCounter(header["seq"])
        self.pool._next_page_id = header["next_page"]
        self.pool.set_free_ids(header.get("free_pages", []))
        self.ops._ids = itertools.count(header["next_node"])
        self.ops.next_node_id = header["next_node"]
        self.store._next_id = max(self.store.next_id, header.get("next_table", 1))
        ranges = [(None if lo is None else bytes.fromhex(lo), None if hi is None else bytes.fromhex(hi))
                  for lo, hi in header.get("hotspots", [])]
        self.hs = HotspotSet.build(ranges, header.get("hs_version", 0))
        self.ops.set_hot(self.hs.ranges)
        # adaptation flags are not persisted: a reopened engine re-adapts if needed
        self.sm = StateMachine(EngineState(header.get("base", "W0")))
        self.sm.phase = Signal(header.get("phase", Signal.WRITE_HEAVY.value))
        referenced = {t.id for n in iter_nodes(root) if n.lsm is not None for t in n.lsm.tables()}
        for f in glob.glob(os.path.join(self.config.data_dir, "sst_*.aha")):
            m = _SST_RE.search(f)
            if m and int(m.group(1)) not in referenced:
                os.unlink(f)
        self._view = View(self._new_memtable(), None, root)

    def _start(self) -> None:
        if not self.config.background:
            return
        roles = []
        if self.mode is not Mode.PURE_BTREE:
            roles.append(("bg-root", self.maintenance_step_root))
        if self.mode is Mode.AHA:
            roles.append(("bg-tree", self.maintenance_step_tree))
        for name, step in roles:
            t = threading.Thread(target=self._loop, args=(step,), name=name, daemon=True)
            t.start()
            self._threads.append(t)

    def _loop(self, step: Callable[[], bool]) -> None:
        while not self._stop:
            try:
                did = step()
            except BaseException as exc:  # surfaced to callers by _check_errors
                log.exception("maintenance failure")
                self._errors.append(exc)
                with self._cv:
                    self._cv.notify_all()
                return
            if not did:
                with self._cv:
                    if not self._stop:
                        self._cv.wait(0.05)

    def _wake(self) -> None:
        with self._cv:
            self._cv.notify_all()

    def _check_errors(self) -> None:
        if self._closed:
            raise AhaError("engine is closed")
        if self._errors:
            raise AhaError("background maintenance failed") from self._errors[0]

    def checkpoint(self) -> None:
        """Write all dirty pages and rewrite the manifest atomically."""
        with self._tree_lock, self._root_busy:
            self.pool.flush_all()
            root = self._view.root
            header = {
                "mode": self.mode.value,
                "seq": self.seq.last,
                "next_page": self.pool.next_page_id,
                "free_pages": self.pool.free_ids,
                "next_node": self.ops.next_node_id,
                "next_table": self.store.next_id,
                "hotspots": [[None if lo is None else lo.hex(), None if hi is None else hi.hex()]
                             for lo, hi in self.hs.ranges],
                "hs_version": self.hs.version,
                "base": self.sm.base.value,
                "phase": self.sm.phase.value,
            }
            write_manifest(os.path.join(self.config.data_dir, MANIFEST), header, root)

    def close(self) -> None:
        if self._closed:
            return
        self._stop = True
        self._wake()
        for t in self._threads:
            t.join()
        self._threads = []
        self._check_errors()
        if self.mode is not Mode.PURE_BTREE:
            with self._admit:
                if self._view.imm is not None:
                    self._flush_imm()
                self._rotate()
                self._flush_imm()
        self.checkpoint()
        self.reclaimer.reclaim()
        for n in iter_nodes(self._view.root):
            if n.lsm is not None:
                for t in n.lsm.tables():
                    t.close()
        self.pool.close()
        self._closed = True

    def __enter__(self) -> "AhaEngine":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- state ------------------------------------------------------------------------

    def state(self) -> EngineState:
        return self.sm.state(self.hs.version)

    @property
    def adapting(self) -> bool:
        return self.mode is Mode.AHA and self.sm.adapting(self.hs.version)

    def transition(self, signal) -> EngineState:
        """Declare the workload phase (read-heavy or write-heavy)."""
        signal = Signal(signal)
        with self._admit:
            self.sm.signal(signal)
        if signal is Signal.READ_HEAVY and self.mode is Mode.AHA:
            self.adapt_log.append(("start", time.perf_counter()))
            if not self.config.background:
                self._check_complete()
        self._wake()
        return self.state()

    def set_hotspots(self, ranges: Sequence[tuple]) -> None:
        """Replace the hotspot set; adaptation flags for the old set lapse."""
        with self._admit:
            hs = HotspotSet.build(ranges, self.hs.version + 1)
            self.ops.set_hot(hs.ranges)
            self.hs = hs
            self.adapt_q.clear()
        if self.adapting:
            self.adapt_log.append(("start", time.perf_counter()))
        self._wake()

    # -- writes -------------------------------------------------------------------------

    def put(self, key: bytes, value: bytes) -> None:
        self._write(bytes(key), PUT, bytes(value))

    def delete(self, key: bytes) -> None:
        self._write(bytes(key), TOMBSTONE, b"")

    def _hot_direct(self, key: bytes) -> bool:
        return self.sm.state(self.hs.version) is EngineState.R and self.hs.contains(key)

    def _write(self, key: bytes, kind: int, value: bytes) -> None:
        check_entry(key, value)
        self._check_errors()
        self.io.add("logical_bytes", encoded_size(key, value))
        if self.mode is Mode.PURE_BTREE:
            self._direct(key, kind, value)
            return
        force_mem = False
        deadline = None
        while True:
            if not force_mem and self._hot_direct(key):
                done = self._direct(key, kind, value)
                if done is not None:
                    return
                force_mem = True
            rotated = False
            with self._admit:
                if not force_mem and self._hot_direct(key):
                    continue
                view = self._view
                if view.mem.put(key, kind, value) is PutResult.ACCEPTED:
                    return
                if view.imm is None:
                    self._rotate()
                    rotated = True
            if rotated:
                if not self.config.background:
                    self._drain()
                continue
            if deadline is None:
                deadline = time.monotonic() + self.config.put_wait_timeout
            self._wait_for_flush(deadline)

    def _rotate(self) -> None:
        """Freeze the mutable MemTable (admission lock held; the immutable slot is free)."""
        with self._view_lock:
            v = self._view
            if v.imm is not None:
                raise RuntimeError("immutable MemTable slot is occupied")
            v.mem.freeze()
            self._view = View(self._new_memtable(), v.mem, v.root)
            self._generation += 1
        self._wake()

    def _wait_for_flush(self, deadline: float) -> None:
        with self._cv:
            while self._view.imm is not None:
                self._check_errors()
                left = deadline - time.monotonic()
                if left <= 0:
                    raise AhaError("timed out waiting for the MemTable flush")
                self._cv.wait(min(left, 0.05))

    def _direct(self, key: bytes, kind: int, value: bytes) -> Optional[bool]:
        """Write straight into a leaf page; None means the caller must batch instead."""
        with self._tree_lock:
            with self._admit:
                if self.mode is not Mode.PURE_BTREE and not self._hot_direct(key):
                    return None
                nodes, indices = leaf_path(self._view.root, key)
                if not nodes[-1].is_page_leaf:
                    return None
                entry = (key, self.seq.next(), kind, value)
            change = self.ops.direct_write(nodes, indices, entry)
            if change is not None:
                self._install(change, "direct")
            if self.mode is Mode.PURE_BTREE:
                self._settle_splits()
        return True

    def _settle_splits(self) -> None:
        # B+tree mode has no tree role, so overfull routing pages split inline
        while True:
            item = self.tree_q.pop()
            if item is None:
                return
            try:
                found = find_path(self._view.root, *item)
                if found is None:
                    continue
                nodes, indices = found
                n = nodes[-1]
                if not n.leaf and len(n.keys) > self.config.fanout:
                    change = self.ops.split_nonleaf(nodes, indices)
                    if change is not None:
                        self._install(change, "split")
            finally:
                self.tree_q.done()

    # -- reads --------------------------------------------------------------------------

    def range(self, lo: Optional[bytes], hi: Optional[bytes],
              stats: Optional[QueryStats] = None) -> list[tuple[bytes, bytes]]:
        """Live ``(key, value)`` pairs with ``lo <= key < hi``, ascending."""
        if lo is not None and hi is not None and lo >= hi:
            raise InputError("range requires lo < hi")
        self._check_errors()
        qs = stats if stats is not None else QueryStats()
        adapting = self.adapting
        visited = [] if adapting else None
        token = self.reclaimer.enter()
        try:
            view = self._view
            sources = []
            for mt in (view.mem, view.imm):
                if mt is not None and len(mt):
                    ents = mt.range(lo, hi)
                    if ents:
                        sources.append(ents)
            self._collect(view.root, lo, hi, sources, qs, visited)
        finally:
            self.reclaimer.exit(token)
        if len(sources) == 1:
            merged = sources[0]
        else:
            merged = merge_newest(sources)
        out = [(e[0], e[3]) for e in merged if e[2] == PUT]
        qs.entries_emitted += len(out)
        if visited:
            self._observe(visited, lo, hi)
        return out

    def get(self, key: bytes, stats: Optional[QueryStats] = None) -> Optional[bytes]:
        key = bytes(key)
        res = self.range(key, key + b"\x00", stats)
        return res[0][1] if res else None

    def _collect(self, root: Node, lo, hi, sources: list, qs: QueryStats, visited) -> None:
        stack = [root]
        pool_read = self.pool.read
        while stack:
            node = stack.pop()
            if visited is not None:
                visited.append(node)
            lsm = node.lsm
            if lsm is not None:
                probed = False
                for run in lsm.runs_newest_first():
                    for t in run.overlapping(lo, hi):
                        probed = True
                        qs.sstables_touched += 1
                        ents = t.scan(lo, hi)
                        if ents:
                            sources.append(ents)
                if probed:
                    qs.nodelsm_probes += 1
            if node.leaf:
                if node.pages:
                    pages = node.pages
                    for i in node.page_span(lo, hi):
                        ents = pool_read(pages[i]).range(lo, hi)
                        qs.pages_read += 1
                        if ents:
                            sources.append(ents)
                continue
            span = node.child_span(lo, hi)
            children = node.children
            for i in reversed(span):
                stack.append(children[i])

    def _observe(self, nodes: Sequence[Node], lo, hi) -> None:
        added = observe_query(nodes, lo, hi, self.hs, self.adapt_q)
        if self.config.background:
            if added:
                self._wake()
        else:
            # queued work advances with every adapting query, not only new enqueues
            self._drain(self.config.units_per_query)

    # -- installation -------------------------------------------------------------------

    def _install(self, change: Change, kind: str) -> None:
        if self.fault_hook is not None and self.fault_hook(kind):
            return
        with self._view_lock:
            v = self._view
            root, parent = splice(v.root, change, self.ops.new_root)
            self._view = View(v.mem, v.imm, root)
            self._generation += 1
        self._retire(change.retired_tables, change.retired_pages)
        for nid, lo in change.follow_up:
            self.tree_q.push(nid, lo)
        if parent is not None and not parent.leaf and len(parent.keys) > self.config.fanout:
            self.tree_q.push(parent.id, parent.lo)
        if self.adapting:
            for nid, lo in reversed(change.adapt_follow_up):
                self.adapt_q.push(nid, lo, front=True, requeue=True)

    def _retire(self, tables, pages=()) -> None:
        if tables:
            self.store.retire(tables)
        if pages:
            pages = list(pages)
            pool = self.pool

            def release():
                for pid, slots in pages:
                    pool.free(pid, slots)

            self.reclaimer.retire(release)

    def _unit_done(self, kind: str) -> None:
        self.units[kind] = self.units.get(kind, 0) + 1
        self.reclaimer.reclaim()
        if self.on_unit is not None:
            self.on_unit(kind)

    # -- root role --------------------------------------------------------------------------

    def _flush_imm(self) -> bool:
        v = self._view
        imm = v.imm
        if imm is None:
            return False
        entries = imm.sorted_entries()
        tables = []
        if entries:
            tables = self.store.write_split(entries, self.hs.bounds, self.policy.sstable_target,
                                            "flush")
        skip = self.fault_hook is not None and self.fault_hook("flush")
        with self._view_lock:
            v = self._view
            root = v.root
            if tables and not skip:
                root = replace(root, lsm=root.lsm.add_runs([Run(tables)]))
            self._view = View(v.mem, None, root)
            self._generation += 1
        self._wake()
        return True

    def maintenance_step_root(self) -> bool:
        """One unit of root work: flush, freeze an overfull bottom, or compact."""
        with self._root_busy:
            root = self._view.root
            lsm = root.lsm
            if self._view.imm is not None and (lsm is None or len(lsm.l1) < self.config.l1_stop_runs):
                self._flush_imm()
                self._unit_done("flush")
                return True
            if lsm is None:
                return False
            if self.mode is Mode.AHA and lsm.bottom_over_capacity(self.policy):
                with self._view_lock:
                    cur = self._view.root
                    frozen = cur.lsm.freeze_bottom()
                    self._view = self._view._replace(root=replace(cur, lsm=frozen))
                    self._generation += 1
                self._unit_done("freeze")
                self._wake()
                return True
            res = compact_once(lsm, self.policy, self.store, self.ops.guards_for(root),
                               root.page_version)
            if res is None:
                if self._view.imm is None:
                    return False
                self._flush_imm()
                self._unit_done("flush")
                return True
            with self._view_lock:
                cur = self._view.root
                new_lsm = res.lsm.rebase(lsm, cur.lsm)
                self._view = self._view._replace(root=replace(cur, lsm=new_lsm))
                self._generation += 1
            self._retire(res.inputs)
            self._unit_done("root_compaction")
            return True

    # -- tree role --------------------------------------------------------------------------

    def maintenance_step_tree(self) -> bool:
        """One unit of tree work in priority order; False when idle."""
        with self._tree_lock:
            root = self._view.root
            if root.lsm is not None and root.lsm.frozen:
                with self._root_busy:
                    root = self._view.root
                    if root.leaf:
                        change = self.ops.bootstrap(root)
                        kind = "bootstrap"
                    else:
                        change = self.ops.node_empty([root], ())
                        kind = "node_empty"
                    if change is not None:
                        self._install(change, kind)
                self._unit_done("tree")
                return True
            while True:
                item = self.tree_q.pop()
                if item is None:
                    break
                try:
                    change, kind = self._node_work(item)
                finally:
                    self.tree_q.done()
                if change is not None:
                    self._unit_done("tree")
                    return True
            if not self.adapting:
                # queries that started before completion may still have enqueued nodes
                self.adapt_q.clear()
            else:
                while True:
                    item = self.adapt_q.pop()
                    if item is None:
                        break
                    try:
                        did = self._adapt_work(item)
                    finally:
                        self.adapt_q.done()
                    if did:
                        self._unit_done("adapt")
                        return True
                if self._generation != self._checked_generation:
                    return self._check_complete()
        return False

    def _node_work(self, item) -> tuple[Optional[Change], str]:
        found = find_path(self._view.root, *item)
        if found is None:
            return None, ""
        nodes, indices = found
        n = nodes[-1]
        is_root = not indices
        if not n.leaf and len(n.keys) > self.config.fanout:
            with self._root_busy:
                nodes, indices = find_path(self._view.root, *item)
                change = self.ops.split_nonleaf(nodes, indices)
                if change is not None:
                    self._install(change, "split")
            return change, "split"
        if n.lsm is None or is_root:
            return None, ""
        if n.lsm.needs_compaction(self.policy):
            res = compact_once(n.lsm, self.policy, self.store, self.ops.guards_for(n),
                               n.page_version)
            change = Change(indices, [replace(n, lsm=res.lsm)], retired_tables=res.inputs,
                            follow_up=[(n.id, n.lo)])
            self._install(change, "compaction")
            return change, "compaction"
        if n.lsm.bottom_over_capacity(self.policy) or n.lsm.frozen:
            if n.leaf:
                change = self.ops.split_leaf(nodes, indices)
                kind = "split"
            else:
                change = self.ops.node_empty(nodes, indices)
                kind = "node_empty"
            if change is not None:
                self._install(change, kind)
            return change, kind
        return None, ""

    def _adapt_work(self, item) -> bool:
        found = find_path(self._view.root, *item)
        if found is None:
            return False
        nodes, indices = found
        n = nodes[-1]
        if not needs_adapt(n, self.hs):
            return False
        is_root = not indices
        lock = self._root_busy if is_root else _NULL_LOCK
        with lock:
            if is_root:
                nodes, indices = find_path(self._view.root, *item)
                n = nodes[-1]
            if not n.leaf:
                change = self.ops.hotspot_empty(nodes, indices)
                kind = "hotspot_empty"
            elif self.config.leaf_strategy is LeafStrategy.SIDE_SPLIT:
                change = self.ops.side_split(nodes, indices)
                kind = "side_split"
            else:
                change = self.ops.down_split(nodes, indices)
                kind = "down_split"
            if change is None:
                return False
            self._install(change, kind)
        return True

    def _check_complete(self) -> bool:
        """Declare R when no node on a hotspot path blocks it and memory holds no hot keys."""
        self._checked_generation = self._generation
        if not self.adapting:
            return False
        hs = self.hs
        if pending_nodes(self._view.root, hs):
            return False
        with self._admit:
            v = self._view
            if v.imm is not None and _has_hot(v.imm, hs):
                return False
            if _has_hot(v.mem, hs):
                if v.imm is None:
                    self._rotate()
                    if not self.config.background:
                        return True
                return False
            self.sm.mark_complete(hs.version)
        self.adapt_log.append(("complete", time.perf_counter()))
        return True

    def _drain(self, budget: Optional[int] = None) -> int:
        """Synchronous mode: run maintenance units until idle (or ``budget`` units)."""
        done = 0
        while budget is None or done < budget:
            did = False
            if self.mode is not Mode.PURE_BTREE and self.maintenance_step_root():
                did = True
            elif self.mode is Mode.AHA and self.maintenance_step_tree():
                did = True
            if not did:
                break
            done += 1
        return done

    def wait_idle(self, timeout: float = 600.0) -> None:
        """Block until both maintenance roles have nothing left to do."""
        if not self.config.background:
            self._drain()
            return
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            self._check_errors()
            with self._tree_lock, self._root_busy:
                busy = (self._view.imm is not None or len(self.tree_q)
                        or (self.adapting and len(self.adapt_q))
                        or self._has_root_work() or self._has_tree_work())
            if not busy:
                return
            time.sleep(0.01)
        raise AhaError("maintenance did not settle in time")

    def _has_root_work(self) -> bool:
        lsm = self._view.root.lsm
        if lsm is None:
            return False
        if self.mode is Mode.AHA and (lsm.bottom_over_capacity(self.policy) or lsm.frozen):
            return True
        return lsm.needs_compaction(self.policy)

    def _has_tree_work(self) -> bool:
        if self.mode is not Mode.AHA:
            return False
        if self.adapting and self._generation != self._checked_generation:
            return True
        return False

    def wait_adapted(self, timeout: float = 600.0) -> bool:
        """Block until the state is R (or the timeout expires)."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            self._check_errors()
            if self.state() is EngineState.R:
                return True
            if not self.config.background:
                if self._drain() == 0:
                    return self.state() is EngineState.R
            time.sleep(0.005)
        return False

    # -- introspection ----------------------------------------------------------------------

    @property
    def view(self) -> View:
        return self._view

    @property
    def root(self) -> Node:
        return self._view.root

    def audit(self) -> list[str]:
        """Structural and freshness violations of the current view."""
        token = self.reclaimer.enter()
        try:
            v = self._view
            problems = audit_structure(v.root, self.pool)
            problems += audit_freshness(v.root, [v.mem, v.imm], self.pool)
        finally:
            self.reclaimer.exit(token)
        return problems

    def scan_all(self) -> list[tuple[bytes, bytes]]:
        return self.range(None, None)

    def stats(self) -> dict:
        v = self._view
        nodes = list(iter_nodes(v.root))
        data = self.io.snapshot()
        data.update(
            state=self.state().value,
            height=height(v.root),
            max_depth=max_depth(v.root),
            nodes=len(nodes),
            page_leaves=sum(1 for n in nodes if n.is_page_leaf),
            lsm_leaves=sum(1 for n in nodes if n.leaf and n.lsm is not None),
            root_levels=v.root.lsm.level_count if v.root.lsm is not None else 0,
            root_tables=v.root.lsm.table_count if v.root.lsm is not None else 0,
            units=dict(self.units),
            adapt_enqueued=self.adapt_q.enqueued,
            adapt_redundant=self.adapt_q.redundant,
        )
        return data


class _NullLock:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


_NULL_LOCK = _NullLock()


def _has_hot(mt: Optional[MemTable], hs: HotspotSet) -> bool:
    if mt is None or not len(mt):
        return False
    return any(mt.has_key_in(lo, hi) for lo, hi in hs.ranges)


def open_engine(data_dir: str, **kwargs) -> AhaEngine:
    return AhaEngine.open(EngineConfig(data_dir=data_dir, **kwargs))
