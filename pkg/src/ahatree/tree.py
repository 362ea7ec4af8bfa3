"""Tree skeleton: nodes pairing a routing page with an optional NodeLsm.

Nodes are immutable.  Structural operations never touch the installed tree;
they return a :class:`Change` describing the replacement of one node by one or
more new nodes, which the engine splices in by path copying.  A node's parent
is never stored; it is whatever node routes to it on the current path.

Three node shapes exist:

* non-leaf: routing keys, children, NodeLsm
* LSM leaf: NodeLsm only (no pages)
* page leaf: a chain of leaf pages and no NodeLsm
"""

from __future__ import annotations

import itertools
import json
import os
import struct
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

from .lsm import (
    EMPTY_RUN, LevelPolicy, NodeLsm, Run, merge_all, single_bottom, spans_guard, stamp_guards,
)
from .storage import (
    PUT, CorruptionError, IOStats, PageBufferPool, Reclaimer, SSTable, SSTableStore,
    decode_records, encode_records, encoded_size, merge_newest, plan_cuts,
)

PAGE_HEADER = struct.Struct("<II")  # entry count, slot count
# Columnar body: u16 key lengths, u32 value lengths, u64 seqs, u8 kinds, then
# all keys and all values.  Decoding is a handful of C-level passes, which keeps
# buffer-pool misses cheap.
_PAGE_FIXED = 2 + 4 + 8 + 1


def page_entry_size(key: bytes, value: bytes) -> int:
    return _PAGE_FIXED + len(key) + len(value)


class LeafPage:
    """Content of one leaf page: entries sorted by key, one per key.

    A page read from disk decodes its keys eagerly and its entries lazily, so
    a short range lookup only materializes the records it returns.
    """

    __slots__ = ("keys", "nbytes", "_entries", "_data", "_cols", "_vstart", "_voffs")

    def __init__(self, entries: Optional[list], nbytes: Optional[int] = None,
                 keys: Optional[list] = None) -> None:
        self._entries = entries
        self.keys = keys if keys is not None else [e[0] for e in entries]
        if nbytes is None:
            nbytes = sum(page_entry_size(e[0], e[3]) for e in entries)
        self.nbytes = nbytes
        self._data = None
        self._voffs = None

    @classmethod
    def from_columns(cls, data: bytes, keys: list, cols: tuple, vstart: int,
                     nbytes: int) -> "LeafPage":
        page = cls(None, nbytes, keys)
        page._data = data
        page._cols = cols
        page._vstart = vstart
        return page

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def entries(self) -> list:
        if self._entries is None:
            self._entries = self._build(0, len(self.keys))
        return self._entries

    def _build(self, i: int, j: int) -> list:
        n = len(self.keys)
        voffs = self._voffs
        if voffs is None:
            voffs = self._voffs = list(itertools.accumulate(self._cols[n:2 * n], initial=self._vstart))
        data, cols, keys = self._data, self._cols, self.keys
        kinds = data[PAGE_HEADER.size + 14 * n:PAGE_HEADER.size + 15 * n]
        seq0 = 2 * n
        return [(keys[x], cols[seq0 + x], kinds[x], data[voffs[x]:voffs[x + 1]]) for x in range(i, j)]

    def slots(self, page_size: int) -> int:
        return max(1, -(-(PAGE_HEADER.size + self.nbytes) // page_size))

    def range(self, lo: Optional[bytes], hi: Optional[bytes]) -> list:
        keys = self.keys
        i = 0 if lo is None else bisect_left(keys, lo)
        j = len(keys) if hi is None else bisect_left(keys, hi)
        if i >= j:
            return []
        if self._entries is not None:
            return self._entries[i:j]
        return self._build(i, j)


EMPTY_PAGE = LeafPage([])


def encode_page(page: LeafPage, page_size: int) -> bytes:
    entries = page.entries
    n = len(entries)
    keys, seqs, kinds, values = zip(*entries) if n else ((), (), (), ())
    return b"".join((
        PAGE_HEADER.pack(n, page.slots(page_size)),
        struct.pack(f"<{n}H{n}I{n}Q", *map(len, keys), *map(len, values), *seqs),
        bytes(kinds), b"".join(keys), b"".join(values),
    ))


def decode_page(data: bytes) -> LeafPage:
    count, _ = PAGE_HEADER.unpack_from(data, 0)
    if not count:
        return EMPTY_PAGE
    n = count
    off = PAGE_HEADER.size
    cols = struct.unpack_from(f"<{n}H{n}I{n}Q", data, off)
    kstart = off + 15 * n
    ends = list(itertools.accumulate(cols[:n], initial=kstart))
    keys = list(map(data.__getitem__, map(slice, ends, ends[1:])))
    vstart = ends[-1]
    end = vstart + sum(cols[n:2 * n])
    return LeafPage.from_columns(data, keys, cols, vstart, end - PAGE_HEADER.size)


def page_slots(head: bytes) -> int:
    return max(1, PAGE_HEADER.unpack_from(head, 0)[1])


def page_budget(page_size: int) -> int:
    return page_size - PAGE_HEADER.size


def pack_pages(entries: Sequence[tuple], page_size: int) -> list[list]:
    """Greedy packing of sorted entries into pages, never splitting an entry."""
    budget = page_budget(page_size)
    pages = []
    cur = []
    size = 0
    for e in entries:
        es = page_entry_size(e[0], e[3])
        if cur and size + es > budget:
            pages.append(cur)
            cur = []
            size = 0
        cur.append(e)
        size += es
    if cur:
        pages.append(cur)
    return pages


@dataclass(frozen=True, eq=False)
class Node:
    id: int
    lo: Optional[bytes]
    hi: Optional[bytes]
    leaf: bool
    keys: tuple = ()
    children: tuple = ()
    lsm: Optional[NodeLsm] = None
    pages: tuple = ()
    seps: tuple = ()
    page_version: int = 0

    @property
    def is_page_leaf(self) -> bool:
        return self.leaf and self.lsm is None

    def child_index(self, key: Optional[bytes]) -> int:
        return 0 if key is None else bisect_right(self.keys, key)

    def child_range(self, i: int) -> tuple[Optional[bytes], Optional[bytes]]:
        lo = self.lo if i == 0 else self.keys[i - 1]
        hi = self.hi if i == len(self.keys) else self.keys[i]
        return lo, hi

    def child_span(self, lo: Optional[bytes], hi: Optional[bytes]) -> range:
        """Indices of children whose range meets ``[lo, hi)``."""
        a = 0 if lo is None else bisect_right(self.keys, lo)
        b = len(self.keys) if hi is None else bisect_left(self.keys, hi)
        return range(a, b + 1)

    def page_span(self, lo: Optional[bytes], hi: Optional[bytes]) -> range:
        a = 0 if lo is None else bisect_right(self.seps, lo)
        b = len(self.seps) if hi is None else bisect_left(self.seps, hi)
        return range(a, min(b, len(self.pages) - 1) + 1) if self.pages else range(0)

    def overlaps(self, lo: Optional[bytes], hi: Optional[bytes]) -> bool:
        if hi is not None and self.lo is not None and hi <= self.lo:
            return False
        if lo is not None and self.hi is not None and lo >= self.hi:
            return False
        return True


@dataclass
class Change:
    """Replace the node at ``indices`` with ``nodes`` separated by ``seps``."""

    indices: tuple
    nodes: list
    seps: list = field(default_factory=list)
    root_lsm: Optional[NodeLsm] = None  # snapshot of the root's LSM when replacing the root
    retired_tables: list = field(default_factory=list)
    retired_pages: list = field(default_factory=list)  # (page_id, slots)
    follow_up: list = field(default_factory=list)  # (node_id, lo) to revisit
    adapt_follow_up: list = field(default_factory=list)  # (node_id, lo) for the adapt queue


def route_range(root: Node, lo: Optional[bytes], hi: Optional[bytes]) -> list[list[Node]]:
    """Root-to-leaf paths whose nodes meet ``[lo, hi)``, left to right."""
    out = []

    def walk(node, prefix):
        path = prefix + [node]
        if node.leaf:
            out.append(path)
            return
        for i in node.child_span(lo, hi):
            walk(node.children[i], path)

    walk(root, [])
    return out


def find_path(root: Node, node_id: int, key: Optional[bytes]) -> Optional[tuple[list, tuple]]:
    """Nodes and child indices from the root to the node ``node_id`` covering ``key``."""
    nodes = [root]
    indices = []
    node = root
    while node.id != node_id:
        if node.leaf:
            return None
        i = node.child_index(key)
        node = node.children[i]
        nodes.append(node)
        indices.append(i)
    return nodes, tuple(indices)


def leaf_path(root: Node, key: bytes) -> tuple[list, tuple]:
    nodes = [root]
    indices = []
    node = root
    while not node.leaf:
        i = node.child_index(key)
        node = node.children[i]
        nodes.append(node)
        indices.append(i)
    return nodes, tuple(indices)


def iter_nodes(root: Node):
    stack = [root]
    while stack:
        node = stack.pop()
        yield node
        if not node.leaf:
            stack.extend(reversed(node.children))


def height(root: Node) -> int:
    h = 1
    node = root
    while not node.leaf:
        node = node.children[0]
        h += 1
    return h


def max_depth(root: Node) -> int:
    if root.leaf:
        return 1
    return 1 + max(max_depth(c) for c in root.children)


def new_root_children(children: Sequence[Node], seps: Sequence[bytes], node_id: int,
                      lsm: NodeLsm) -> Node:
    return Node(node_id, None, None, False, tuple(seps), tuple(children), lsm)


def _extra_l1(snapshot: NodeLsm, current: NodeLsm) -> tuple:
    if current is snapshot:
        return ()
    n = len(snapshot.l1)
    if current.l1[:n] != snapshot.l1 or current.deep != snapshot.deep \
            or current.frozen != snapshot.frozen:
        raise RuntimeError("root LSM changed beyond L1 appends during a tree change")
    return current.l1[n:]


def splice(root: Node, change: Change, new_root: Callable[[list, list], Node]) -> tuple[Node, Node]:
    """Apply ``change`` to ``root`` by path copying.

    Returns the new root and the (new version of the) parent of the replaced
    node, or the new root when the root itself was replaced.
    """
    indices = change.indices
    nodes, seps = list(change.nodes), list(change.seps)
    if not indices:
        extra = ()
        if change.root_lsm is not None and root.lsm is not None:
            extra = _extra_l1(change.root_lsm, root.lsm)
        if len(nodes) == 1:
            top = nodes[0]
            if extra:
                top = replace(top, lsm=top.lsm.add_runs(extra))
            return top, top
        top = new_root(nodes, seps)
        if extra:
            top = replace(top, lsm=top.lsm.add_runs(extra))
        return top, top

    chain = [root]
    for i in indices[:-1]:
        chain.append(chain[-1].children[i])
    parent = None
    for depth in range(len(indices) - 1, -1, -1):
        node = chain[depth]
        i = indices[depth]
        if nodes is None:
            children = node.children[:i] + (cur,) + node.children[i + 1:]
            node = replace(node, children=children)
        else:
            keys = node.keys[:i] + tuple(seps) + node.keys[i:]
            children = node.children[:i] + tuple(nodes) + node.children[i + 1:]
            node = replace(node, keys=keys, children=children,
                           page_version=node.page_version + (1 if seps else 0))
            parent = node
            nodes = None
        cur = node
    return cur, parent


class TreeOps:
    """Structural operations over immutable nodes.

    Every method reads the current nodes it is given and returns a
    :class:`Change`; nothing installed is mutated.  Tables and pages that a
    change makes unreachable are listed on it for deferred reclamation.
    """

    def __init__(self, store: SSTableStore, pool: PageBufferPool, policy: LevelPolicy,
                 stats: IOStats, root_max_levels: int = 3, node_max_levels: int = 2,
                 fanout: int = 256, chain_pages: int = 16, next_node_id: int = 1) -> None:
        self.store = store
        self.pool = pool
        self.policy = policy
        self.stats = stats
        self.root_max_levels = root_max_levels
        self.node_max_levels = node_max_levels
        self.fanout = fanout
        self.chain_pages = chain_pages
        self.page_size = pool.page_size
        self._ids = itertools.count(next_node_id)
        self.next_node_id = next_node_id
        self.hot: list[tuple[Optional[bytes], Optional[bytes]]] = []
        self.hot_bounds: list[bytes] = []

    def new_id(self) -> int:
        nid = next(self._ids)
        self.next_node_id = nid + 1
        return nid

    def set_hot(self, ranges: Sequence[tuple]) -> None:
        self.hot = list(ranges)
        self.hot_bounds = sorted({b for r in ranges for b in r if b is not None})

    def new_root(self, nodes: list, seps: list) -> Node:
        return new_root_children(nodes, seps, self.new_id(),
                                 NodeLsm(max_levels=self.root_max_levels))

    # -- helpers ----------------------------------------------------------------

    def guards_for(self, node: Node) -> list[bytes]:
        """Routing keys of ``node`` plus hotspot bounds inside its range."""
        bounds = [b for b in self.hot_bounds
                  if (node.lo is None or b > node.lo) and (node.hi is None or b < node.hi)]
        if not bounds:
            return list(node.keys)
        return sorted(set(node.keys) | set(bounds))

    def hot_in(self, lo: Optional[bytes], hi: Optional[bytes]) -> bool:
        for hlo, hhi in self.hot:
            if (hhi is None or lo is None or lo < hhi) and (hlo is None or hi is None or hlo < hi):
                return True
        return False

    def split_hot(self, entries: list) -> tuple[list, list]:
        """Partition sorted entries into (hot, cold) by the hotspot ranges."""
        if not self.hot or not entries:
            return [], list(entries)
        keys = [e[0] for e in entries]
        hot = []
        cold = []
        pos = 0
        for hlo, hhi in self.hot:
            a = 0 if hlo is None else bisect_left(keys, hlo)
            b = len(keys) if hhi is None else bisect_left(keys, hhi)
            a = max(a, pos)
            if a < b:
                cold.extend(entries[pos:a])
                hot.extend(entries[a:b])
                pos = b
        cold.extend(entries[pos:])
        return hot, cold

    def table_is_hot(self, table: SSTable) -> bool:
        for hlo, hhi in self.hot:
            if (hhi is None or table.min_key < hhi) and (hlo is None or table.max_key >= hlo):
                return True
        return False

    def retire_page(self, change: Change, pid: int, page: LeafPage) -> None:
        change.retired_pages.append((pid, page.slots(self.page_size)))

    def write_page(self, entries: list) -> tuple[int, LeafPage]:
        page = LeafPage(entries)
        pid = self.pool.allocate(page.slots(self.page_size))
        self.pool.write(pid, page)
        return pid, page

    def page_leaves(self, first_id: Optional[int], lo: Optional[bytes], hi: Optional[bytes],
                    pages: list[tuple[int, bytes]]) -> tuple[list[Node], list[bytes]]:
        """Group ``(page_id, first_key)`` pairs into page-leaf nodes of bounded chain length."""
        if not pages:
            return [Node(first_id if first_id is not None else self.new_id(), lo, hi, True)], []
        groups = [pages[i:i + self.chain_pages] for i in range(0, len(pages), self.chain_pages)]
        nodes = []
        seps = []
        for gi, group in enumerate(groups):
            glo = lo if gi == 0 else group[0][1]
            ghi = hi if gi == len(groups) - 1 else groups[gi + 1][0][1]
            nid = first_id if (gi == 0 and first_id is not None) else self.new_id()
            nodes.append(Node(nid, glo, ghi, True, pages=tuple(p for p, _ in group),
                              seps=tuple(k for _, k in group[1:])))
            if gi:
                seps.append(group[0][1])
        return nodes, seps

    def build_pages(self, entries: Sequence[tuple]) -> list[tuple[int, bytes]]:
        live = [e for e in entries if e[2] == PUT]
        out = []
        for chunk in pack_pages(live, self.page_size):
            pid, _ = self.write_page(chunk)
            out.append((pid, chunk[0][0]))
        return out

    def merge_into_pages(self, node: Node, entries: list, change: Change) -> tuple[list[Node], list[bytes]]:
        """Merge sorted newest-wins ``entries`` into a page leaf (copy on write).

        Tombstones and superseded versions are dropped here.  Pages that
        receive nothing are kept as they are.
        """
        if not node.pages:
            return self.page_leaves(node.id, node.lo, node.hi, self.build_pages(entries))
        pages = list(node.pages)
        seps = list(node.seps)
        buckets: dict[int, list] = {}
        ekeys = [e[0] for e in entries]
        bounds = [0]
        for s in seps:
            bounds.append(bisect_left(ekeys, s))
        bounds.append(len(entries))
        for i in range(len(pages)):
            if bounds[i] < bounds[i + 1]:
                buckets[i] = entries[bounds[i]:bounds[i + 1]]
        out: list[tuple[int, bytes]] = []
        for i, pid in enumerate(pages):
            first = None if i == 0 else seps[i - 1]
            incoming = buckets.get(i)
            if incoming is None:
                out.append((pid, first))
                continue
            old = self.pool.read(pid)
            merged = merge_newest([old.entries, incoming])
            live = [e for e in merged if e[2] == PUT]
            self.retire_page(change, pid, old)
            chunks = pack_pages(live, self.page_size)
            for ci, chunk in enumerate(chunks):
                npid, _ = self.write_page(chunk)
                out.append((npid, first if ci == 0 else chunk[0][0]))
        return self.page_leaves(node.id, node.lo, node.hi, out)

    # -- node emptying --------------------------------------------------------------

    def node_empty(self, nodes: list[Node], indices: tuple) -> Optional[Change]:
        """Move the bottom level of a non-leaf NodeLsm into its children."""
        n = nodes[-1]
        if n.leaf or n.lsm is None:
            return None
        runs, remainder = n.lsm.extract_bottom()
        if not runs:
            return None
        change = Change(indices, [], root_lsm=n.lsm if not indices else None)
        stable = n.lsm.guards_version is not None and n.lsm.guards_version == n.page_version
        self.stats.add("node_empty_calls")
        if stable:
            self.stats.add("aligned_node_empty_calls")
        keys = n.keys
        incoming: dict[int, list[Run]] = {}
        for run in runs:
            per_child: dict[int, list] = {}
            for t in run.tables:
                a = bisect_right(keys, t.min_key)
                b = bisect_right(keys, t.max_key)
                if a == b:
                    per_child.setdefault(a, []).append(t)
                    continue
                ents = t.read_all()
                ekeys = [e[0] for e in ents]
                for c in range(a, b + 1):
                    clo, chi = n.child_range(c)
                    i = 0 if clo is None else bisect_left(ekeys, clo)
                    j = len(ents) if chi is None else bisect_left(ekeys, chi)
                    if i >= j:
                        continue
                    before = self.stats.migration_bytes_written
                    tabs = self.store.write_split(ents[i:j], self.guards_for(n.children[c]),
                                                  self.policy.sstable_target, "migration")
                    if stable:
                        self.stats.add("aligned_migration_bytes_written",
                                       self.stats.migration_bytes_written - before)
                    per_child.setdefault(c, []).extend(tabs)
                change.retired_tables.append(t)
            for c, tabs in per_child.items():
                incoming.setdefault(c, []).append(Run(tabs))
        new_children = list(n.children)
        new_keys = list(keys)
        # walk right to left so index shifts from page-leaf splits do not disturb pending ones
        for c in sorted(incoming, reverse=True):
            child = n.children[c]
            child_runs = incoming[c]
            if child.is_page_leaf:
                entries = merge_newest([t.read_all() for r in child_runs for t in r.tables])
                change.retired_tables.extend(t for r in child_runs for t in r.tables)
                leaves, seps = self.merge_into_pages(child, entries, change)
                new_children[c:c + 1] = leaves
                new_keys[c:c] = seps
                change.follow_up.extend((x.id, x.lo) for x in leaves if self.hot_in(x.lo, x.hi))
            else:
                child = replace(child, lsm=child.lsm.add_runs(child_runs))
                new_children[c] = child
                change.follow_up.append((child.id, child.lo))
                if self.hot_in(child.lo, child.hi):
                    change.adapt_follow_up.append((child.id, child.lo))
        version = n.page_version + (1 if len(new_keys) != len(keys) else 0)
        new_n = replace(n, children=tuple(new_children), keys=tuple(new_keys), page_version=version)
        new_n = replace(new_n, lsm=stamp_guards(remainder, self.guards_for(new_n), version))
        change.nodes = [new_n]
        change.follow_up.append((n.id, n.lo))
        return change

    # -- splits -----------------------------------------------------------------------

    def split_leaf(self, nodes: list[Node], indices: tuple) -> Optional[Change]:
        """Multi-way split of an LSM leaf: one sibling per merged output table."""
        n = nodes[-1]
        merged = merge_all(n.lsm)
        if len(merged) < 2:
            return None
        cuts = plan_cuts(merged, self.guards_for(n), self.policy.sstable_target)
        if len(cuts) == 1:
            m = len(merged) // 2
            cuts = [(0, m), (m, len(merged))]
        tables = [self.store.write(merged[a:b], "split") for a, b in cuts]
        change = Change(indices, [], retired_tables=n.lsm.tables(),
                        root_lsm=n.lsm if not indices else None)
        seps = [t.min_key for t in tables[1:]]
        bounds = [n.lo] + seps + [n.hi]
        siblings = []
        for i, t in enumerate(tables):
            sib = Node(self.new_id(), bounds[i], bounds[i + 1], True,
                       lsm=single_bottom([t], self.node_max_levels))
            siblings.append(sib)
            change.follow_up.append((sib.id, sib.lo))
            if self.hot_in(sib.lo, sib.hi):
                change.adapt_follow_up.append((sib.id, sib.lo))
        change.nodes = siblings
        change.seps = seps
        return change

    def split_nonleaf(self, nodes: list[Node], indices: tuple) -> Optional[Change]:
        """Median split of an over-full routing page; the NodeLsm is divided by merging."""
        n = nodes[-1]
        if n.leaf or len(n.keys) < 2:
            return None
        m = len(n.keys) // 2
        sep = n.keys[m]
        change = Change(indices, [], root_lsm=n.lsm if not indices else None)
        left_tables: list[SSTable] = []
        right_tables: list[SSTable] = []
        if n.lsm is not None and not n.lsm.is_empty():
            merged = merge_all(n.lsm)
            guards = sorted(set(n.keys) | set(self.hot_bounds))
            for t in self.store.write_split(merged, guards, self.policy.sstable_target, "split"):
                (left_tables if t.max_key < sep else right_tables).append(t)
            change.retired_tables = n.lsm.tables()
        left = Node(self.new_id(), n.lo, sep, False, n.keys[:m], n.children[:m + 1],
                    single_bottom(left_tables, self.node_max_levels))
        right = Node(self.new_id(), sep, n.hi, False, n.keys[m + 1:], n.children[m + 1:],
                     single_bottom(right_tables, self.node_max_levels))
        change.nodes = [left, right]
        change.seps = [sep]
        for x in (left, right):
            change.follow_up.append((x.id, x.lo))
            if self.hot_in(x.lo, x.hi):
                change.adapt_follow_up.append((x.id, x.lo))
        return change

    def bootstrap(self, root: Node) -> Optional[Change]:
        """Turn the frozen bottom run of a leaf root into leaves using metadata only."""
        if not root.leaf or root.lsm is None:
            return None
        run, remainder = root.lsm.extract_oldest_bottom_run()
        if run is None:
            return None
        change = Change((), [], root_lsm=root.lsm)
        tables = list(run.tables)
        if len(tables) < 2:
            ents = tables[0].read_all()
            if len(ents) < 2:
                out = tables
            else:
                m = len(ents) // 2
                out = [self.store.write(ents[:m], "split"), self.store.write(ents[m:], "split")]
                change.retired_tables = tables
            tables = out
        seps = [t.min_key for t in tables[1:]]
        bounds = [None] + seps + [None]
        leaves = []
        for i, t in enumerate(tables):
            leaf = Node(self.new_id(), bounds[i], bounds[i + 1], True,
                        lsm=single_bottom([t], self.node_max_levels))
            leaves.append(leaf)
            change.follow_up.append((leaf.id, leaf.lo))
        new_root = Node(root.id, None, None, False, tuple(seps), tuple(leaves), remainder,
                        page_version=root.page_version + 1)
        new_root = replace(new_root, lsm=stamp_guards(remainder, self.guards_for(new_root),
                                                      new_root.page_version))
        change.nodes = [new_root]
        change.follow_up.append((root.id, None))
        return change

    # -- adaptation ---------------------------------------------------------------------

    def hotspot_empty(self, nodes: list[Node], indices: tuple) -> Optional[Change]:
        """Push every hotspot entry of a non-leaf NodeLsm down to its children."""
        n = nodes[-1]
        if n.leaf or n.lsm is None or not self.hot:
            return None
        hot_tables = [t for t in n.lsm.tables() if self.table_is_hot(t)]
        if not hot_tables:
            return None
        change = Change(indices, [], root_lsm=n.lsm if not indices else None)
        guards = self.guards_for(n)
        replacements = {}
        hot_sources = []
        for t in hot_tables:
            hot, cold = self.split_hot(t.read_all())
            replacements[id(t)] = self.store.write_split(cold, guards, self.policy.sstable_target,
                                                         "adapt") if cold else []
            hot_sources.append(hot)
            change.retired_tables.append(t)
        remainder = n.lsm.replace_tables(replacements)
        merged = merge_newest(hot_sources)
        mkeys = [e[0] for e in merged]
        new_children = list(n.children)
        new_keys = list(n.keys)
        span = range(len(n.children))
        for c in reversed(span):
            clo, chi = n.child_range(c)
            i = 0 if clo is None else bisect_left(mkeys, clo)
            j = len(merged) if chi is None else bisect_left(mkeys, chi)
            if i >= j:
                continue
            chunk = merged[i:j]
            child = n.children[c]
            if child.is_page_leaf:
                leaves, seps = self.merge_into_pages(child, chunk, change)
                new_children[c:c + 1] = leaves
                new_keys[c:c] = seps
            else:
                tabs = self.store.write_split(chunk, self.guards_for(child),
                                              self.policy.sstable_target, "adapt")
                child = replace(child, lsm=child.lsm.add_runs([Run(tabs)]))
                new_children[c] = child
                change.follow_up.append((child.id, child.lo))
                change.adapt_follow_up.append((child.id, child.lo))
        new_n = replace(n, lsm=remainder, children=tuple(new_children), keys=tuple(new_keys),
                        page_version=n.page_version + (1 if len(new_keys) != len(n.keys) else 0))
        change.nodes = [new_n]
        change.follow_up.append((n.id, n.lo))
        return change

    def to_pages(self, nodes: list[Node], indices: tuple) -> Change:
        """Merge a leaf NodeLsm entirely into leaf pages (possibly several siblings)."""
        n = nodes[-1]
        entries = merge_all(n.lsm)
        change = Change(indices, [], retired_tables=n.lsm.tables(),
                        root_lsm=n.lsm if not indices else None)
        if not indices:
            # the root keeps an LSM for incoming flushes, so pages go one level down
            leaves, seps = self.page_leaves(None, None, None, self.build_pages(entries))
            change.nodes = [Node(n.id, None, None, False, tuple(seps), tuple(leaves),
                                 NodeLsm(max_levels=self.root_max_levels),
                                 page_version=n.page_version + 1)]
            return change
        leaves, seps = self.page_leaves(n.id, n.lo, n.hi, self.build_pages(entries))
        change.nodes = leaves
        change.seps = seps
        return change

    def down_split(self, nodes: list[Node], indices: tuple) -> Optional[Change]:
        """Leaf transformation by growing a level below the leaf.

        A single-table leaf is converted to pages directly.  Otherwise the
        oldest bottom run is extracted: each of its tables becomes a
        single-table child and the leaf turns into a non-leaf keeping the
        remaining (fresher) tables.
        """
        n = nodes[-1]
        if not n.leaf or n.lsm is None:
            return None
        if n.lsm.table_count <= 1:
            return self.to_pages(nodes, indices)
        run, remainder = n.lsm.extract_oldest_bottom_run()
        tables = list(run.tables)
        change = Change(indices, [], root_lsm=n.lsm if not indices else None)
        seps = [t.min_key for t in tables[1:]]
        bounds = [n.lo] + seps + [n.hi]
        children = []
        for i, t in enumerate(tables):
            child = Node(self.new_id(), bounds[i], bounds[i + 1], True,
                         lsm=single_bottom([t], self.node_max_levels))
            children.append(child)
            if self.hot_in(child.lo, child.hi):
                change.adapt_follow_up.append((child.id, child.lo))
        new_n = Node(n.id, n.lo, n.hi, False, tuple(seps), tuple(children), remainder,
                     page_version=n.page_version + 1)
        change.nodes = [new_n]
        change.adapt_follow_up.append((n.id, n.lo))
        change.follow_up.append((n.id, n.lo))
        return change

    def side_split(self, nodes: list[Node], indices: tuple) -> Optional[Change]:
        """Leaf transformation by merging the whole NodeLsm into sibling page leaves."""
        n = nodes[-1]
        if not n.leaf or n.lsm is None:
            return None
        return self.to_pages(nodes, indices)

    # -- direct writes ----------------------------------------------------------------------

    def direct_write(self, nodes: list[Node], indices: tuple, entry: tuple) -> Optional[Change]:
        """Write one entry straight into a page leaf; tombstones remove the key.

        Returns None when the page was updated in place (no structural change).
        """
        n = nodes[-1]
        key = entry[0]
        if not n.pages:
            if entry[2] != PUT:
                return None
            change = Change(indices, [])
            pid, _ = self.write_page([entry])
            change.nodes = [replace(n, pages=(pid,), seps=())]
            return change
        i = bisect_right(n.seps, key)
        pid = n.pages[i]
        old = self.pool.read(pid)
        ents = list(old.entries)
        keys = old.keys
        j = bisect_left(keys, key)
        present = j < len(keys) and keys[j] == key
        if entry[2] != PUT:
            if not present:
                return None
            del ents[j]
        elif present:
            ents[j] = entry
        else:
            ents.insert(j, entry)
        page = LeafPage(ents)
        if page.slots(self.page_size) <= old.slots(self.page_size):
            self.pool.write(pid, page)
            return None
        change = Change(indices, [])
        self.retire_page(change, pid, old)
        if len(ents) == 1:
            npid, _ = self.write_page(ents)
            parts = [(npid, ents)]
        else:
            half = page.nbytes // 2
            acc = 0
            cut = 1
            for k, e in enumerate(ents):
                acc += page_entry_size(e[0], e[3])
                if acc >= half:
                    cut = min(max(k + 1, 1), len(ents) - 1)
                    break
            parts = []
            for chunk in (ents[:cut], ents[cut:]):
                npid, _ = self.write_page(chunk)
                parts.append((npid, chunk))
        pages = list(n.pages)
        seps = list(n.seps)
        pages[i:i + 1] = [p for p, _ in parts]
        seps[i:i] = [c[0][0] for _, c in parts[1:]]
        if len(pages) <= self.chain_pages:
            change.nodes = [replace(n, pages=tuple(pages), seps=tuple(seps))]
            return change
        m = len(pages) // 2
        sep = seps[m - 1]
        left = Node(n.id, n.lo, sep, True, pages=tuple(pages[:m]), seps=tuple(seps[:m - 1]))
        right = Node(self.new_id(), sep, n.hi, True, pages=tuple(pages[m:]), seps=tuple(seps[m:]))
        change.nodes = [left, right]
        change.seps = [sep]
        return change

    # -- reads ------------------------------------------------------------------------

    def leaf_pages_range(self, node: Node, lo: Optional[bytes], hi: Optional[bytes]) -> tuple[list, int]:
        out = []
        count = 0
        for i in node.page_span(lo, hi):
            page = self.pool.read(node.pages[i])
            count += 1
            out.extend(page.range(lo, hi))
        return out, count

    def all_page_entries(self, node: Node) -> list:
        out = []
        for pid in node.pages:
            out.extend(self.pool.read(pid).entries)
        return out


# -- audits -----------------------------------------------------------------------------


def audit_structure(root: Node, pool: Optional[PageBufferPool] = None) -> list[str]:
    """Well-formedness violations: routing order, child counts, contiguous ranges, contents."""
    problems = []

    def within(key, lo, hi):
        return (lo is None or key >= lo) and (hi is None or key < hi)

    def walk(node, lo, hi):
        if node.lo != lo or node.hi != hi:
            problems.append(f"node {node.id}: range {node.lo!r}..{node.hi!r} != {lo!r}..{hi!r}")
        if node.lsm is not None:
            for r in node.lsm.runs_newest_first():
                for t in r.tables:
                    if not (within(t.min_key, lo, hi) and within(t.max_key, lo, hi)):
                        problems.append(f"node {node.id}: table {t.id} outside range")
            for i, r in enumerate(node.lsm.deep):
                for a, b in zip(r.tables, r.tables[1:]):
                    if a.max_key >= b.min_key:
                        problems.append(f"node {node.id}: L{i + 2} overlap")
        if node.leaf:
            if node.children or node.keys:
                problems.append(f"node {node.id}: leaf with routing entries")
            if node.pages and node.lsm is not None:
                problems.append(f"node {node.id}: leaf with both pages and LSM")
            if len(node.seps) != max(0, len(node.pages) - 1):
                problems.append(f"node {node.id}: page separators mismatch")
            if list(node.seps) != sorted(set(node.seps)):
                problems.append(f"node {node.id}: page separators unsorted")
            if pool is not None:
                prev = None
                for i, pid in enumerate(node.pages):
                    plo = lo if i == 0 else node.seps[i - 1]
                    phi = hi if i == len(node.pages) - 1 else node.seps[i]
                    page = pool.read(pid)
                    for k in page.keys:
                        if not within(k, plo, phi):
                            problems.append(f"node {node.id}: page {pid} key outside bounds")
                            break
                        if prev is not None and k <= prev:
                            problems.append(f"node {node.id}: page keys unsorted")
                            break
                        prev = k
            return
        if len(node.children) != len(node.keys) + 1:
            problems.append(f"node {node.id}: {len(node.children)} children for {len(node.keys)} keys")
            return
        for a, b in zip(node.keys, node.keys[1:]):
            if a >= b:
                problems.append(f"node {node.id}: routing keys not increasing")
        for k in node.keys:
            if not within(k, lo, hi) or k == lo:
                problems.append(f"node {node.id}: routing key outside range")
        bounds = [lo] + list(node.keys) + [hi]
        for i, c in enumerate(node.children):
            walk(c, bounds[i], bounds[i + 1])

    walk(root, None, None)
    return problems


def _lsm_seq_by_key(lsm: NodeLsm, problems: list, node_id) -> dict:
    """Per-key highest seq in a NodeLsm, checking freshness across its runs."""
    best: dict = {}
    for r in lsm.runs_newest_first():
        run_best: dict = {}
        for t in r.tables:
            for e in t.read_all():
                run_best[e[0]] = e[1]
        for k, s in run_best.items():
            prev = best.get(k)
            if prev is None:
                best[k] = s
            elif s >= prev:
                problems.append(f"node {node_id}: level freshness violated for {k!r}")
    return best


def audit_freshness(root: Node, memtables: Sequence, pool: Optional[PageBufferPool]) -> list[str]:
    """Violations of: memory fresher than disk, ancestors fresher than descendants."""
    problems: list[str] = []
    floor: dict = {}
    for mt in memtables:
        if mt is None:
            continue
        for e in mt.sorted_entries():
            prev = floor.get(e[0])
            if prev is not None and e[1] >= prev:
                problems.append(f"memtable order violated for {e[0]!r}")
            floor[e[0]] = e[1] if prev is None else min(prev, e[1])

    def walk(node, floor):
        here = {}
        if node.lsm is not None:
            here = _lsm_seq_by_key(node.lsm, problems, node.id)
        if node.is_page_leaf and pool is not None:
            for pid in node.pages:
                for e in pool.read(pid).entries:
                    here[e[0]] = e[1]
        for k, s in here.items():
            f = floor.get(k)
            if f is not None and s >= f:
                problems.append(f"node {node.id}: {k!r} seq {s} not older than ancestor seq {f}")
        if node.leaf:
            return
        if here:
            floor = dict(floor)
            for k, s in here.items():
                f = floor.get(k)
                floor[k] = s if f is None else min(f, s)
        for c in node.children:
            walk(c, floor)

    walk(root, floor)
    return problems


# -- manifest ------------------------------------------------------------------------------


def _hex(b: Optional[bytes]):
    return None if b is None else b.hex()


def _unhex(s) -> Optional[bytes]:
    return None if s is None else bytes.fromhex(s)


def _lsm_record(lsm: Optional[NodeLsm]):
    if lsm is None:
        return None
    return {
        "max_levels": lsm.max_levels,
        "l1": [[t.id for t in r.tables] for r in lsm.l1],
        "deep": [[t.id for t in r.tables] for r in lsm.deep],
        "frozen": [[t.id for t in r.tables] for r in lsm.frozen],
        "guards_version": lsm.guards_version,
    }


def write_manifest(path: str, header: dict, root: Node) -> None:
    """Write header and nodes (parents before children) atomically."""
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(json.dumps({"type": "engine", **header}) + "\n")
        stack = [(root, None)]
        while stack:
            node, parent = stack.pop()
            rec = {
                "type": "node", "id": node.id, "parent": parent, "leaf": node.leaf,
                "lo": _hex(node.lo), "hi": _hex(node.hi),
                "keys": [k.hex() for k in node.keys],
                "children": [c.id for c in node.children],
                "lsm": _lsm_record(node.lsm), "pages": list(node.pages),
                "seps": [k.hex() for k in node.seps], "page_version": node.page_version,
            }
            f.write(json.dumps(rec) + "\n")
            for c in reversed(node.children):
                stack.append((c, node.id))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_manifest(path: str, open_table: Callable[[int], SSTable]) -> tuple[dict, Node]:
    """Rebuild the tree from a manifest; raises CorruptionError with a diagnostic."""
    try:
        with open(path) as f:
            lines = [json.loads(line) for line in f if line.strip()]
    except (OSError, ValueError) as exc:
        raise CorruptionError(f"{path}: unreadable manifest ({exc})") from None
    if not lines or lines[0].get("type") != "engine":
        raise CorruptionError(f"{path}: missing engine header")
    header = lines[0]
    recs = {}
    for rec in lines[1:]:
        if rec.get("type") != "node" or "id" not in rec:
            raise CorruptionError(f"{path}: malformed node record {rec!r}")
        recs[rec["id"]] = rec
    roots = [r for r in recs.values() if r["parent"] is None]
    if len(roots) != 1:
        raise CorruptionError(f"{path}: expected one root, found {len(roots)}")
    tables: dict[int, SSTable] = {}

    def table(tid):
        if tid not in tables:
            tables[tid] = open_table(tid)
        return tables[tid]

    def lsm_of(rec):
        if rec is None:
            return None
        return NodeLsm(
            max_levels=rec["max_levels"],
            l1=tuple(Run(table(t) for t in r) for r in rec["l1"]),
            deep=tuple(Run(table(t) for t in r) for r in rec["deep"]),
            frozen=tuple(Run(table(t) for t in r) for r in rec["frozen"]),
            guards_version=rec.get("guards_version"),
        )

    def build(nid):
        rec = recs.get(nid)
        if rec is None:
            raise CorruptionError(f"{path}: dangling child reference {nid}")
        children = tuple(build(c) for c in rec["children"])
        return Node(rec["id"], _unhex(rec["lo"]), _unhex(rec["hi"]), rec["leaf"],
                    tuple(bytes.fromhex(k) for k in rec["keys"]), children, lsm_of(rec["lsm"]),
                    tuple(rec["pages"]), tuple(bytes.fromhex(k) for k in rec["seps"]),
                    rec.get("page_version", 0))

    return header, build(roots[0]["id"])
