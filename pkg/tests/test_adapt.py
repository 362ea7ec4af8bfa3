import pytest
from hypothesis import given, settings, strategies as st

from ahatree import EngineState, InputError, QueryStats, Signal
from ahatree.adapt import (
    AdaptQueue, HotspotSet, LeafStrategy, StateMachine, needs_adapt, observe_query,
    parse_strategy, pending_nodes,
)
from ahatree.lsm import NodeLsm, Run, single_bottom
from ahatree.tree import Node, iter_nodes, route_range
from conftest import ent, k


def test_hotspot_set_validation():
    hs = HotspotSet.build([(k(50), k(60)), (k(10), k(20))], 1)
    assert hs.ranges == ((k(10), k(20)), (k(50), k(60)))
    assert hs.contains(k(15)) and not hs.contains(k(20))
    assert hs.covers(k(51), k(60)) and not hs.covers(k(15), k(55))
    with pytest.raises(InputError):
        HotspotSet.build([(k(10), k(30)), (k(20), k(40))], 1)
    with pytest.raises(InputError):
        HotspotSet.build([(k(30), k(30))], 1)


def tree_with_root_lsm(store, keys):
    t = store.write([ent(i, i + 1) for i in keys])
    kids = (Node(1, None, k(50), True, lsm=NodeLsm(max_levels=2)),
            Node(2, k(50), None, True, lsm=NodeLsm(max_levels=2)))
    return Node(0, None, None, False, (k(50),), kids, NodeLsm(max_levels=3, l1=(Run([t]),)))


def test_observe_cold_query_enqueues_nothing(store):
    root = tree_with_root_lsm(store, range(0, 10))
    hs = HotspotSet.build([(k(70), k(80))], 1)
    q = AdaptQueue()
    nodes = [n for p in route_range(root, k(0), k(5)) for n in p]
    assert observe_query(nodes, k(0), k(5), hs, q) == 0 or len(q) <= 1
    # the root LSM does not touch [70, 80); only the hot leaf blocks R
    assert [n.id for n in pending_nodes(root, hs)] == [2]


def test_observe_root_overlapping_hotspot(store):
    root = tree_with_root_lsm(store, range(60, 90))
    hs = HotspotSet.build([(k(70), k(80))], 1)
    q = AdaptQueue()
    nodes = [n for p in route_range(root, k(72), k(74)) for n in p]
    assert observe_query(nodes, k(72), k(74), hs, q) == 2
    assert q.pop()[0] == 0
    # repeats are redundant, not new work
    q.done()
    assert observe_query(nodes, k(72), k(74), hs, q) == 1
    assert q.redundant == 1


def test_wider_query_enqueues_more(store):
    root = tree_with_root_lsm(store, range(0, 90))
    hs = HotspotSet.build([(k(30), k(80))], 1)
    narrow, wide = AdaptQueue(), AdaptQueue()
    observe_query([n for p in route_range(root, k(31), k(32)) for n in p], k(31), k(32), hs, narrow)
    observe_query([n for p in route_range(root, k(31), k(70)) for n in p], k(31), k(70), hs, wide)
    assert len(wide) > len(narrow)


def test_needs_adapt_rules(store):
    hs = HotspotSet.build([(k(10), k(20))], 1)
    cold_leaf = Node(1, k(30), k(40), True, lsm=NodeLsm(max_levels=2))
    hot_lsm_leaf = Node(2, k(0), k(30), True, lsm=NodeLsm(max_levels=2))
    page_leaf = Node(3, k(0), k(30), True, pages=(1,))
    assert not needs_adapt(cold_leaf, hs)
    assert needs_adapt(hot_lsm_leaf, hs)
    assert not needs_adapt(page_leaf, hs)


def test_adapt_queue_front_and_dedup():
    q = AdaptQueue()
    assert q.push(1, None) and q.push(2, None)
    assert q.push(3, None, front=True)
    assert not q.push(2, None)
    assert [q.pop()[0] for _ in range(3)] == [3, 1, 2]
    assert q.pop() is None


def test_state_machine_transitions():
    sm = StateMachine()
    assert sm.state(1) is EngineState.W0
    sm.signal(Signal.READ_HEAVY)
    assert sm.adapting(1) and sm.state(1) is EngineState.W0
    sm.mark_complete(1)
    assert sm.state(1) is EngineState.R
    # new hotspots invalidate completion
    assert sm.state(2) is EngineState.WPLUS
    sm.signal(Signal.WRITE_HEAVY)
    assert sm.state(1) is EngineState.WPLUS
    sm.signal(Signal.READ_HEAVY)
    assert sm.adapting(1)


def test_parse_strategy():
    assert parse_strategy("down") is LeafStrategy.DOWN_SPLIT
    assert parse_strategy("side") is LeafStrategy.SIDE_SPLIT
    with pytest.raises(ValueError):
        parse_strategy("sideways")


def adapt(eng, rounds=200):
    """Scan the hotspots until the engine reports R (adaptation is query-triggered)."""
    for _ in range(rounds):
        for lo, hi in eng.hs.ranges:
            eng.range(lo, hi)
        eng.wait_adapted()
        if eng.state() is EngineState.R:
            return True
    return False


def test_no_queries_no_adaptation(make_engine):
    eng = make_engine()
    load(eng, 1000)
    eng.set_hotspots([(k(100), k(300))])
    eng.transition("read_heavy")
    assert not eng.wait_adapted()
    assert eng.stats()["units"]["adapt"] == 0


def load(eng, n, step=1):
    for i in range(0, n, step):
        eng.put(k(i), b"v%d" % i)


@pytest.mark.parametrize("strategy", ["down", "side"])
def test_adaptation_reaches_r_with_zero_probes(make_engine, strategy):
    eng = make_engine(leaf_strategy=strategy)
    load(eng, 3000)
    eng.wait_idle()
    eng.set_hotspots([(k(1000), k(1300))])
    assert eng.transition(Signal.READ_HEAVY) is not EngineState.R
    assert adapt(eng)
    assert eng.state() is EngineState.R
    qs = QueryStats()
    got = eng.range(k(1100), k(1150), qs)
    assert [x for x, _ in got] == [k(i) for i in range(1100, 1150)]
    assert qs.nodelsm_probes == 0
    assert not eng.audit()
    # every hot key now lives in pages only
    for n in iter_nodes(eng.root):
        if n.leaf and eng.hs.intersects(n.lo, n.hi):
            assert n.is_page_leaf


def test_strategies_agree_on_content(make_engine):
    results = []
    for strategy in ("down", "side"):
        eng = make_engine(sub=strategy, leaf_strategy=strategy)
        load(eng, 2000)
        for i in range(0, 2000, 7):
            eng.delete(k(i))
        eng.set_hotspots([(k(500), k(900))])
        eng.transition("read_heavy")
        assert adapt(eng)
        results.append(eng.scan_all())
    assert results[0] == results[1]


def test_hot_write_in_r_goes_to_page(make_engine):
    eng = make_engine()
    load(eng, 2000)
    eng.set_hotspots([(k(500), k(900))])
    eng.transition("read_heavy")
    assert adapt(eng)
    before = len(eng.view.mem)
    eng.put(k(600), b"fresh")
    assert len(eng.view.mem) == before
    eng.put(k(1500), b"cold")
    assert len(eng.view.mem) == before + 1
    assert eng.get(k(600)) == b"fresh"
    qs = QueryStats()
    eng.range(k(600), k(601), qs)
    assert qs.nodelsm_probes == 0


def test_drift_restarts_adaptation(make_engine):
    eng = make_engine()
    load(eng, 2000)
    eng.set_hotspots([(k(100), k(300))])
    eng.transition("read_heavy")
    assert adapt(eng)
    eng.set_hotspots([(k(1200), k(1400))])
    assert eng.state() is EngineState.WPLUS
    assert adapt(eng)
    qs = QueryStats()
    eng.range(k(1250), k(1300), qs)
    assert qs.nodelsm_probes == 0


def test_write_heavy_leaves_r(make_engine):
    eng = make_engine()
    load(eng, 1000)
    eng.set_hotspots([(k(100), k(300))])
    eng.transition("read_heavy")
    assert adapt(eng)
    assert eng.transition("write_heavy") is EngineState.WPLUS
    before = len(eng.view.mem)
    eng.put(k(150), b"x")
    assert len(eng.view.mem) == before + 1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1800), st.integers(20, 300), st.sampled_from(["down", "side"]))
def test_adaptation_property(tmp_path_factory, lo, width, strategy):
    from ahatree import AhaEngine, EngineConfig
    from conftest import SMALL
    d = tmp_path_factory.mktemp("p")
    with AhaEngine.open(EngineConfig(data_dir=str(d), background=False, leaf_strategy=strategy,
                                     **SMALL)) as eng:
        load(eng, 2000, 3)
        hi = min(lo + width, 2000)
        eng.set_hotspots([(k(lo), k(hi))])
        eng.transition("read_heavy")
        assert adapt(eng)
        assert not pending_nodes(eng.root, eng.hs)
        qs = QueryStats()
        got = eng.range(k(lo), k(hi), qs)
        assert [x for x, _ in got] == [k(i) for i in range(lo, hi) if i % 3 == 0]
        assert qs.nodelsm_probes == 0
        assert not eng.audit()
