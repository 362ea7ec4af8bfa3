import pytest

from ahatree import AhaEngine, EngineConfig
from ahatree.storage import IOStats, PageBufferPool, Reclaimer, SSTableStore
from ahatree.tree import decode_page, encode_page, page_slots


def k(i: int) -> bytes:
    return b"%06d" % i


def ent(key, seq, value=b"v", kind=0):
    if isinstance(key, int):
        key = k(key)
    return (key, seq, kind, value if kind == 0 else b"")


SMALL = dict(memtable_budget=8 << 10, sstable_target=2 << 10, base_level_bytes=4 << 10,
             page_size=512, pool_pages=512, fanout=8, chain_pages=4)


@pytest.fixture
def store(tmp_path):
    stats = IOStats()
    return SSTableStore(str(tmp_path), stats, Reclaimer())


@pytest.fixture
def pool(tmp_path):
    p = PageBufferPool(str(tmp_path / "pages.aha"), 512, 256, encode_page, decode_page,
                       slots_of=page_slots)
    yield p
    p.close()


@pytest.fixture
def make_engine(tmp_path):
    opened = []

    def factory(sub="db", **overrides):
        cfg = dict(SMALL, background=False)
        cfg.update(overrides)
        eng = AhaEngine.open(EngineConfig(data_dir=str(tmp_path / sub), **cfg))
        opened.append(eng)
        return eng

    yield factory
    for eng in opened:
        if not eng._closed:
            eng.close()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
