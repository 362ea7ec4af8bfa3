import random

import pytest
from hypothesis import given, settings, strategies as st

from ahatree.engine import View
from ahatree.lsm import EMPTY_RUN, LevelPolicy, NodeLsm, Run, is_aligned, single_bottom
from ahatree.storage import PUT, CorruptionError, IOStats, MemTable, Reclaimer, SSTableStore
from ahatree.tree import (
    LeafPage, Node, TreeOps, audit_freshness, audit_structure, iter_nodes, read_manifest,
    route_range, splice, write_manifest,
)
from conftest import ent, k


@pytest.fixture
def env(tmp_path, pool):
    stats = IOStats()
    store = SSTableStore(str(tmp_path), stats, Reclaimer())
    ops = TreeOps(store, pool, LevelPolicy(), stats, fanout=4, chain_pages=4)
    return ops, store, stats


def tab(store, items):
    """items: (key, seq, value) with string keys."""
    return store.write(sorted((key.encode(), seq, PUT, val.encode()) for key, seq, val in items))


def fig3_tree(store):
    """Three-level tree: root | N1 N2 N3, with N2 | N21 N22."""
    root_t = tab(store, [("10", 33, "10"), ("61", 30, "61_1"), ("63", 31, "63"), ("67", 32, "67")])
    n2_t = tab(store, [("61", 20, "61_2"), ("62", 21, "62_1"), ("65", 22, "65_1")])
    n21 = Node(21, b"50", b"65", True, lsm=single_bottom([tab(store, [("62", 10, "62_2"), ("64", 11, "64")])], 2))
    n22 = Node(22, b"65", b"80", True, lsm=single_bottom([tab(store, [("65", 12, "65_2"), ("69", 13, "69")])], 2))
    n1 = Node(1, None, b"50", True, lsm=single_bottom([tab(store, [("20", 1, "20")])], 2))
    n3 = Node(3, b"80", None, True, lsm=single_bottom([tab(store, [("90", 2, "90")])], 2))
    n2 = Node(2, b"50", b"80", False, (b"65",), (n21, n22), single_bottom([n2_t], 2))
    return Node(0, None, None, False, (b"50", b"80"), (n1, n2, n3),
                NodeLsm(max_levels=3, l1=(Run([root_t]),)))


def test_route_single_node():
    root = Node(0, None, None, True)
    assert route_range(root, b"a", b"z") == [[root]]


def test_route_fig3(store):
    root = fig3_tree(store)
    nodes = {n.id for path in route_range(root, b"60", b"70") for n in path}
    assert nodes == {0, 2, 21, 22}


def test_range_fig3(make_engine, store):
    eng = make_engine()
    root = fig3_tree(store)
    eng._view = View(MemTable(), None, root)
    from ahatree import QueryStats
    qs = QueryStats()
    got = eng.range(b"60", b"70", qs)
    assert [v for _, v in got] == [b"61_1", b"62_1", b"63", b"64", b"65_1", b"67", b"69"]
    assert qs.nodelsm_probes == 4
    assert not audit_structure(root)
    assert not audit_freshness(root, [], None)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 99), st.integers(1, 60))
def test_route_matches_bruteforce(tmp_path_factory, a, w):
    import itertools
    store = SSTableStore(str(tmp_path_factory.mktemp("r")), IOStats(), Reclaimer())
    root = fig3_tree(store)
    lo, hi = b"%02d" % a, b"%02d" % min(a + w, 99)
    if lo >= hi:
        return
    routed = {n.id for path in route_range(root, lo, hi) for n in path}
    brute = {n.id for n in iter_nodes(root) if n.overlaps(lo, hi)}
    assert routed == brute


def fig5_tree(eng):
    """AHA-R shape: hotspot [55,69) in pages P1 and P2 of N21."""
    store, ops = eng.store, eng.ops
    p1, _ = ops.write_page([(b"56", 5, PUT, b"56"), (b"60", 6, PUT, b"60"), (b"65", 7, PUT, b"65")])
    p2, _ = ops.write_page([(b"67", 8, PUT, b"67"), (b"68", 9, PUT, b"68")])
    n20 = Node(20, b"50", b"55", True, lsm=single_bottom([tab(store, [("52", 1, "52")])], 2))
    n21 = Node(21, b"55", b"69", True, pages=(p1, p2), seps=(b"66",))
    n22 = Node(22, b"69", b"80", True, lsm=single_bottom([tab(store, [("70", 2, "70"), ("75", 3, "75")])], 2))
    n2 = Node(2, b"50", b"80", False, (b"55", b"69"), (n20, n21, n22),
              single_bottom([tab(store, [("71", 20, "71")])], 2))
    n1 = Node(1, None, b"50", True, lsm=single_bottom([tab(store, [("20", 4, "20")])], 2))
    n3 = Node(3, b"80", None, True, lsm=single_bottom([tab(store, [("90", 10, "90")])], 2))
    root_lsm = NodeLsm(max_levels=3, l1=(Run([tab(store, [("30", 30, "30")]),
                                              tab(store, [("72", 31, "72")])]),))
    return Node(0, None, None, False, (b"50", b"80"), (n1, n2, n3), root_lsm)


def test_range_fig5_split_query(make_engine):
    from ahatree import QueryStats
    eng = make_engine()
    eng.set_hotspots([(b"55", b"69")])
    eng._view = View(MemTable(), None, fig5_tree(eng))
    qs = QueryStats()
    got = eng.range(b"65", b"73", qs)
    assert [key for key, _ in got] == [b"65", b"67", b"68", b"70", b"71", b"72"]
    # cold part probes R, N2, N22; hot part reads P1 and P2 only
    assert qs.nodelsm_probes == 3
    assert qs.pages_read == 2
    hot = QueryStats()
    eng.range(b"56", b"68", hot)
    assert hot.nodelsm_probes == 0


def test_bootstrap_fig6b(env):
    ops, store, stats = env
    s1 = store.write([(c.encode(), i, PUT, b"v") for i, c in enumerate("abcdef")])
    s2 = store.write([(c.encode(), i, PUT, b"v") for i, c in enumerate("ghijklm")])
    s3 = store.write([(c.encode(), i, PUT, b"v") for i, c in enumerate("nopqrstuvwxyz")])
    root_lsm = NodeLsm(max_levels=3, frozen=(Run([s1, s2, s3]),))
    root = Node(0, None, None, True, lsm=root_lsm)
    reads = stats.data_block_reads
    change = ops.bootstrap(root)
    new_root, _ = splice(root, change, ops.new_root)
    assert stats.data_block_reads == reads
    assert new_root.keys == (b"g", b"n")
    assert [c.lsm.tables() for c in new_root.children] == [[s1], [s2], [s3]]
    assert not audit_structure(new_root)


def test_bootstrap_two_tables(env):
    ops, store, stats = env
    a = store.write([(b"a", 1, PUT, b"v")])
    b = store.write([(b"m", 2, PUT, b"v")])
    root = Node(0, None, None, True, lsm=NodeLsm(max_levels=3, frozen=(Run([a, b]),)))
    new_root, _ = splice(root, ops.bootstrap(root), ops.new_root)
    assert new_root.keys == (b"m",) and len(new_root.children) == 2


def test_bootstrap_single_table_median(env):
    ops, store, stats = env
    t = store.write([ent(i, i + 1) for i in range(10)])
    root = Node(0, None, None, True, lsm=NodeLsm(max_levels=3, frozen=(Run([t]),)))
    new_root, _ = splice(root, ops.bootstrap(root), ops.new_root)
    assert new_root.keys == (k(5),)


def three_children(store, page_version=0):
    kids = tuple(Node(10 + i, lo, hi, True, lsm=NodeLsm(max_levels=2))
                 for i, (lo, hi) in enumerate([(None, k(10)), (k(10), k(20)), (k(20), None)]))
    return kids


def test_node_empty_fig4_pointer_move(env):
    ops, store, stats = env
    tables = [store.write([ent(lo + j, lo + j + 1) for j in range(3)]) for lo in (0, 5, 12, 25)]
    assert is_aligned(tables, [k(10), k(20)])
    lsm = NodeLsm(max_levels=2, deep=(Run(tables),), guards_version=4)
    n3 = Node(3, None, None, False, (k(10), k(20)), three_children(store), lsm, page_version=4)
    before = stats.migration_bytes_written
    change = ops.node_empty([n3], ())
    new, _ = splice(n3, change, ops.new_root)
    assert new.lsm.is_empty()
    assert stats.migration_bytes_written == before
    assert [c.lsm.tables() for c in new.children] == [tables[:2], [tables[2]], [tables[3]]]
    assert stats.aligned_node_empty_calls == 1 and stats.aligned_migration_bytes_written == 0


def test_node_empty_misaligned_rewrites(env):
    ops, store, stats = env
    t = store.write([ent(i, i + 1) for i in range(5, 15)])
    n = Node(3, None, None, False, (k(10), k(20)), three_children(store),
             NodeLsm(max_levels=2, deep=(Run([t]),)))
    new, _ = splice(n, ops.node_empty([n], ()), ops.new_root)
    assert stats.migration_bytes_written > 0
    assert [len(c.lsm.tables()) for c in new.children] == [1, 1, 0]
    assert not audit_structure(new)


def test_node_empty_nothing_to_move(env):
    ops, store, stats = env
    n = Node(3, None, None, False, (k(10), k(20)), three_children(store), NodeLsm(max_levels=2))
    assert ops.node_empty([n], ()) is None


def test_split_nonleaf_fig4_key13(env):
    ops, store, stats = env
    keys = tuple(k(x) for x in (5, 10, 13, 15, 20))
    kids = tuple(Node(100 + i, None if i == 0 else keys[i - 1], None if i == 5 else keys[i], True,
                      lsm=NodeLsm(max_levels=2)) for i in range(6))
    n1 = Node(1, None, None, False, keys, kids, NodeLsm(max_levels=2))
    written = stats.sst_bytes_written
    change = ops.split_nonleaf([n1], ())
    new_root, _ = splice(n1, change, ops.new_root)
    assert stats.sst_bytes_written == written
    assert new_root.keys == (k(13),)
    s1, s2 = new_root.children
    assert s1.keys == (k(5), k(10)) and s2.keys == (k(15), k(20))
    assert not audit_structure(new_root)


def test_split_nonleaf_distributes_lsm(env):
    ops, store, stats = env
    keys = tuple(k(x) for x in (10, 20, 30, 40, 50))
    kids = tuple(Node(100 + i, None if i == 0 else keys[i - 1], None if i == 5 else keys[i], True,
                      lsm=NodeLsm(max_levels=2)) for i in range(6))
    t = store.write([ent(i, i + 1) for i in range(0, 60, 3)])
    n = Node(1, None, None, False, keys, kids, NodeLsm(max_levels=2, l1=(Run([t]),)))
    new_root, _ = splice(n, ops.split_nonleaf([n], ()), ops.new_root)
    left, right = new_root.children
    assert all(x.max_key < k(30) for x in left.lsm.tables())
    assert all(x.min_key >= k(30) for x in right.lsm.tables())
    assert not audit_structure(new_root)


def test_split_leaf_three_way(env):
    ops, store, stats = env
    ops.policy = LevelPolicy(sstable_target=1)
    entries = [ent(i, i + 1) for i in range(3)]
    leaf = Node(7, None, None, True, lsm=single_bottom([store.write(entries)], 2))
    parent_root = Node(0, None, None, False, (), (leaf,), NodeLsm(max_levels=3))
    change = ops.split_leaf([parent_root, leaf], (0,))
    new_root, parent = splice(parent_root, change, ops.new_root)
    assert len(new_root.children) == 3 and len(new_root.keys) == 2
    assert all(c.lsm.table_count == 1 for c in new_root.children)


def test_split_leaf_median_fallback(env):
    ops, store, stats = env
    leaf = Node(7, None, None, True, lsm=single_bottom([store.write([ent(i, i + 1) for i in range(6)])], 2))
    root = Node(0, None, None, False, (), (leaf,), NodeLsm(max_levels=3))
    new_root, _ = splice(root, ops.split_leaf([root, leaf], (0,)), ops.new_root)
    assert new_root.keys == (k(3),)


def test_down_split_fig8(env):
    ops, store, stats = env
    ops.set_hot([(None, None)])
    bottom = [store.write([ent(lo + j, lo + j + 1) for j in range(3)]) for lo in (0, 10, 20)]
    upper = store.write([ent(5, 100)])
    leaf = Node(7, None, None, True, lsm=NodeLsm(max_levels=2, l1=(Run([upper]),), deep=(Run(bottom),)))
    root = Node(0, None, None, False, (), (leaf,), NodeLsm(max_levels=3))
    written = stats.sst_bytes_written
    new_root, _ = splice(root, ops.down_split([root, leaf], (0,)), ops.new_root)
    assert stats.sst_bytes_written == written
    node = new_root.children[0]
    assert not node.leaf and len(node.children) == 3
    assert [c.lsm.tables() for c in node.children] == [[t] for t in bottom]
    assert node.lsm.tables() == [upper]
    assert not audit_structure(new_root)


def test_down_split_single_table_becomes_pages(env):
    ops, store, stats = env
    leaf = Node(7, None, None, True, lsm=single_bottom([store.write([ent(1, 1), ent(2, 2, kind=1)])], 2))
    root = Node(0, None, None, False, (), (leaf,), NodeLsm(max_levels=3))
    new_root, _ = splice(root, ops.down_split([root, leaf], (0,)), ops.new_root)
    node = new_root.children[0]
    assert node.is_page_leaf and len(node.pages) == 1
    assert ops.pool.read(node.pages[0]).keys == [k(1)]


def test_side_split_page_count(env):
    ops, store, stats = env
    entries = [ent(i, i + 1, b"x" * 40) for i in range(50)]
    t1 = store.write(entries[:30])
    t2 = store.write(entries[20:])
    leaf = Node(7, None, None, True, lsm=NodeLsm(max_levels=2, l1=(Run([t2]),), deep=(Run([t1]),)))
    root = Node(0, None, None, False, (), (leaf,), NodeLsm(max_levels=3))
    new_root, _ = splice(root, ops.side_split([root, leaf], (0,)), ops.new_root)
    pages = [p for c in new_root.children for p in c.pages]
    per = 2 + 4 + 8 + 1 + 6 + 40  # fixed columns plus key and value
    budget = 512 - 8
    assert len(pages) == -(-50 // (budget // per))
    assert all(c.is_page_leaf for c in new_root.children)


def test_hotspot_empty_fig5_shape(env):
    ops, store, stats = env
    ops.set_hot([(k(55), k(69))])
    t = store.write([ent(i, 1000 + i) for i in range(40, 76)])
    kids = tuple(Node(10 + i, lo, hi, True, lsm=NodeLsm(max_levels=2))
                 for i, (lo, hi) in enumerate([(None, k(50)), (k(50), k(80)), (k(80), None)]))
    root = Node(0, None, None, False, (k(50), k(80)), kids, NodeLsm(max_levels=3, deep=(EMPTY_RUN, Run([t]))))
    new_root, _ = splice(root, ops.hotspot_empty([root], ()), ops.new_root)
    left = [e[0] for x in new_root.lsm.tables() for e in x.read_all()]
    assert left == [k(i) for i in list(range(40, 55)) + list(range(69, 76))]
    moved = [e[0] for x in new_root.children[1].lsm.tables() for e in x.read_all()]
    assert moved == [k(i) for i in range(55, 69)]
    assert not audit_freshness(new_root, [], None)


def test_manifest_round_trip(env, tmp_path):
    ops, store, stats = env
    root = fig3_tree(store)
    path = str(tmp_path / "MANIFEST.aha")
    write_manifest(path, {"seq": 5}, root)
    header, back = read_manifest(path, store.open)
    assert header["seq"] == 5
    assert [(n.id, n.keys, n.lo, n.hi) for n in iter_nodes(back)] == \
        [(n.id, n.keys, n.lo, n.hi) for n in iter_nodes(root)]
    assert [[t.id for t in n.lsm.tables()] for n in iter_nodes(back)] == \
        [[t.id for t in n.lsm.tables()] for n in iter_nodes(root)]


def test_manifest_corruption(tmp_path, store):
    path = tmp_path / "MANIFEST.aha"
    path.write_text('{"type": "engine"}\n{"type": "node", "id": 1, "parent": null, "children": [9]}\n')
    with pytest.raises(CorruptionError, match="dangling"):
        read_manifest(str(path), store.open)
    path.write_text("not json")
    with pytest.raises(CorruptionError):
        read_manifest(str(path), store.open)


def test_audit_detects_freshness_violation(store):
    child = Node(1, None, None, True, lsm=single_bottom([tab(store, [("10", 9, "new")])], 2))
    root = Node(0, None, None, False, (), (child,),
                NodeLsm(max_levels=3, l1=(Run([tab(store, [("10", 3, "old")])]),)))
    assert audit_freshness(root, [], None)


def test_audit_detects_bad_routing():
    a = Node(1, None, b"5", True)
    b = Node(2, b"4", None, True)
    root = Node(0, None, None, False, (b"5",), (a, b))
    assert audit_structure(root)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.binary(min_size=1, max_size=12), st.tuples(st.integers(0, 2**40), st.booleans(),
                                                                    st.binary(max_size=50)), max_size=40),
       st.binary(max_size=12), st.binary(max_size=12))
def test_page_round_trip_and_range(items, lo, hi):
    from ahatree.tree import decode_page, encode_page
    entries = [(key, seq, 1 if dead else 0, b"" if dead else val)
               for key, (seq, dead, val) in sorted(items.items())]
    page = LeafPage(entries)
    data = encode_page(page, 64)
    assert len(data) == 8 + page.nbytes
    back = decode_page(data.ljust(page.slots(64) * 64, b"\0"))
    lo_, hi_ = (lo or None), (hi or None)
    expect = [e for e in entries if (lo_ is None or e[0] >= lo_) and (hi_ is None or e[0] < hi_)]
    assert back.range(lo_, hi_) == expect
    assert back.entries == entries and back.keys == [e[0] for e in entries]
    assert back.nbytes == page.nbytes
