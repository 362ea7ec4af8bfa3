import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from ahatree import AhaEngine, AhaError, EngineConfig, EngineState, InputError, Mode, QueryStats
from ahatree.storage import MAX_KEY_BYTES, MAX_VALUE_BYTES
from conftest import SMALL, k
from test_adapt import adapt


def oracle_range(model, lo, hi):
    return [(key, model[key]) for key in sorted(model)
            if (lo is None or key >= lo) and (hi is None or key < hi)]


def test_input_validation(make_engine):
    eng = make_engine()
    with pytest.raises(InputError):
        eng.put(b"", b"v")
    with pytest.raises(InputError):
        eng.put(b"x" * (MAX_KEY_BYTES + 1), b"v")
    with pytest.raises(InputError):
        eng.put(b"k", b"x" * (MAX_VALUE_BYTES + 1))
    with pytest.raises(InputError):
        eng.range(k(5), k(5))
    with pytest.raises(InputError):
        eng.set_hotspots([(k(1), k(5)), (k(3), k(8))])


def test_get_put_delete(make_engine):
    eng = make_engine()
    eng.put(b"a", b"1")
    eng.put(b"a", b"2")
    assert eng.get(b"a") == b"2"
    eng.delete(b"a")
    assert eng.get(b"a") is None
    assert eng.scan_all() == []


OPS = st.lists(st.tuples(st.sampled_from(["put", "del"]), st.integers(0, 400), st.binary(max_size=60)),
               min_size=1, max_size=600)


@settings(max_examples=25, deadline=None)
@given(OPS, st.sampled_from(["aha", "pure-lsm", "pure-btree"]))
def test_random_ops_match_oracle(tmp_path_factory, ops, mode):
    d = tmp_path_factory.mktemp("e")
    model = {}
    with AhaEngine.open(EngineConfig(data_dir=str(d), mode=mode, background=False, **SMALL)) as eng:
        for op, i, v in ops:
            if op == "put":
                eng.put(k(i), v)
                model[k(i)] = v
            else:
                eng.delete(k(i))
                model.pop(k(i), None)
        assert eng.scan_all() == oracle_range(model, None, None)
        assert eng.range(k(100), k(200)) == oracle_range(model, k(100), k(200))
        assert not eng.audit()


def test_audit_after_every_unit(make_engine):
    eng = make_engine()
    problems = []
    eng.on_unit = lambda kind: problems.extend(eng.audit())
    rnd = random.Random(3)
    for n in range(6000):
        i = rnd.randrange(3000)
        eng.put(k(i), b"v%d" % n)
        if n % 11 == 0:
            eng.delete(k(rnd.randrange(3000)))
    eng.set_hotspots([(k(1000), k(1400))])
    eng.transition("read_heavy")
    assert adapt(eng)
    eng.transition("write_heavy")
    for n in range(3000):
        eng.put(k(rnd.randrange(3000)), b"w%d" % n)
    eng.transition("read_heavy")
    assert adapt(eng)
    assert sum(eng.units.values()) > 50
    assert problems == []


def test_reopen_round_trip(tmp_path):
    cfg = dict(SMALL, background=False, data_dir=str(tmp_path / "db"))
    model = {}
    with AhaEngine.open(EngineConfig(**cfg)) as eng:
        for i in range(3000):
            eng.put(k(i), b"v%d" % i)
            model[k(i)] = b"v%d" % i
        for i in range(0, 3000, 5):
            eng.delete(k(i))
            del model[k(i)]
        eng.set_hotspots([(k(500), k(800))])
        eng.transition("read_heavy")
        assert adapt(eng)
        eng.put(k(600), b"hot")
        model[k(600)] = b"hot"
        shape = eng.stats()["nodes"]
    with AhaEngine.open(EngineConfig(**cfg)) as eng:
        assert eng.scan_all() == oracle_range(model, None, None)
        assert eng.stats()["nodes"] == shape
        assert not eng.audit()
        # a reopened engine keeps accepting writes without reusing ids
        for i in range(3000, 4000):
            eng.put(k(i), b"n")
        eng.wait_idle()
        assert len(eng.scan_all()) == len(model) + 1000


def test_closed_engine_rejects_writes(tmp_path):
    cfg = dict(SMALL, background=False, data_dir=str(tmp_path / "db"))
    eng = AhaEngine.open(EngineConfig(**cfg))
    for i in range(500):
        eng.put(k(i), b"v")
    eng.close()
    with pytest.raises(AhaError):
        eng.put(k(1), b"v")
    with AhaEngine.open(EngineConfig(**cfg)) as again:
        assert len(again.scan_all()) == 500


def test_r_reads_probe_no_nodelsm(make_engine):
    eng = make_engine()
    for i in range(4000):
        eng.put(k(i), b"v")
    eng.set_hotspots([(k(2000), k(2500))])
    eng.transition("read_heavy")
    assert eng.state() is EngineState.W0
    cold = QueryStats()
    eng.range(k(2100), k(2200), cold)
    assert cold.nodelsm_probes > 0
    assert adapt(eng)
    for lo in range(2000, 2500, 37):
        qs = QueryStats()
        hi = min(lo + 20, 2500)
        assert len(eng.range(k(lo), k(hi), qs)) == hi - lo
        assert qs.nodelsm_probes == 0


def test_transition_states(make_engine):
    eng = make_engine()
    for i in range(1000):
        eng.put(k(i), b"v")
    eng.set_hotspots([(k(0), k(100))])
    assert eng.state() is EngineState.W0
    eng.transition("read_heavy")
    assert adapt(eng)
    assert eng.transition("write_heavy") is EngineState.WPLUS
    eng.transition("read_heavy")
    assert adapt(eng)
    assert eng.state() is EngineState.R


def test_pure_modes_never_adapt(make_engine):
    for mode in ("pure-lsm", "pure-btree"):
        eng = make_engine(sub=mode, mode=mode)
        for i in range(2000):
            eng.put(k(i), b"v")
        eng.set_hotspots([(k(0), k(100))])
        eng.transition("read_heavy")
        eng.range(k(0), k(100))
        eng.wait_idle()
        assert eng.state() is not EngineState.R
        assert eng.units["adapt"] == 0


def test_pure_lsm_has_single_node(make_engine):
    eng = make_engine(mode="pure-lsm")
    for i in range(5000):
        eng.put(k(i), b"v" * 20)
    eng.wait_idle()
    st_ = eng.stats()
    assert st_["nodes"] == 1 and st_["height"] == 1


def test_pure_btree_uses_pages_only(make_engine):
    eng = make_engine(mode="pure-btree")
    for i in range(3000):
        eng.put(k(i), b"v" * 20)
    st_ = eng.stats()
    assert st_["sst_bytes_written"] == 0
    assert st_["lsm_leaves"] == 0 and st_["page_leaves"] > 1
    qs = QueryStats()
    assert len(eng.range(k(10), k(60), qs)) == 50
    assert qs.nodelsm_probes == 0


def test_modes_agree(make_engine):
    rnd = random.Random(9)
    script = [(rnd.randrange(2000), rnd.random() < 0.1) for _ in range(5000)]
    results = []
    for mode in ("aha", "pure-lsm", "pure-btree"):
        eng = make_engine(sub=mode, mode=mode)
        for n, (i, dele) in enumerate(script):
            if dele:
                eng.delete(k(i))
            else:
                eng.put(k(i), b"%d" % n)
        results.append(eng.scan_all())
    assert results[0] == results[1] == results[2]


def test_concurrent_readers_see_consistent_snapshots(tmp_path):
    """Background roles restructure the tree while readers check monotone versions."""
    cfg = EngineConfig(data_dir=str(tmp_path / "db"), **SMALL)
    n = 1500
    with AhaEngine.open(cfg) as eng:
        for i in range(n):
            eng.put(k(i), b"%08d" % 0)
        errors = []
        stop = threading.Event()

        def reader():
            rnd = random.Random()
            while not stop.is_set():
                lo = rnd.randrange(n - 50)
                got = eng.range(k(lo), k(lo + 50))
                if len(got) != 50:
                    errors.append(("missing", lo, len(got)))

        threads = [threading.Thread(target=reader) for _ in range(2)]
        for t in threads:
            t.start()
        eng.set_hotspots([(k(300), k(600))])
        eng.transition("read_heavy")
        for rnd_ in range(1, 6):
            for i in range(n):
                eng.put(k(i), b"%08d" % rnd_)
        stop.set()
        for t in threads:
            t.join()
        eng.wait_idle()
        assert errors == []
        assert all(v == b"%08d" % 5 for _, v in eng.scan_all())
        assert not eng.audit()


def test_background_adaptation(tmp_path):
    cfg = EngineConfig(data_dir=str(tmp_path / "db"), **SMALL)
    with AhaEngine.open(cfg) as eng:
        for i in range(3000):
            eng.put(k(i), b"v")
        eng.wait_idle()
        eng.set_hotspots([(k(1000), k(1200))])
        eng.transition("read_heavy")
        for _ in range(2000):
            eng.range(k(1000), k(1200))
            if eng.state() is EngineState.R:
                break
        assert eng.wait_adapted(60)
        qs = QueryStats()
        eng.range(k(1050), k(1100), qs)
        assert qs.nodelsm_probes == 0


def test_root_l1_bounded_by_stop_trigger(make_engine):
    # background flushes wait behind root compaction once L1 is full
    eng = make_engine("bp", mode="pure-lsm", background=True, l1_stop_runs=5)
    seen = []
    eng.on_unit = lambda kind: seen.append(len(eng.root.lsm.l1))
    for i in range(6000):
        eng.put(k(i % 3000), b"x" * 40)
    eng.wait_idle()
    assert max(seen) <= 5
    assert eng.get(k(17)) == b"x" * 40


def test_stop_trigger_below_compaction_trigger_rejected(tmp_path):
    with pytest.raises(InputError):
        EngineConfig(data_dir=str(tmp_path), l1_run_trigger=4, l1_stop_runs=3)
