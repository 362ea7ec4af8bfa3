"""Phase execution, metrics collection and oracle verification."""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
import threading
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..adapt import EngineState, Signal
from ..engine import AhaEngine, EngineConfig, Mode, QueryStats
from ..storage import AhaError
from .workload import OP_DELETE, OP_PUT, OP_SCAN, OpBatch, PhaseKind, WorkloadSpec, gen_ops, phase_batches

log = logging.getLogger(__name__)

WINDOW = 100
STATE_CODES = {EngineState.W0: 0, EngineState.R: 1, EngineState.WPLUS: 2}
STATE_NAMES = {v: k.value for k, v in STATE_CODES.items()}
CSV_HEADER = "op_index,wall_ns,window_tput,state,nodelsm_probes"


@dataclass
class RunConfig:
    mode: Mode = Mode.AHA
    threads: int = 1
    root_levels: int = 3
    node_levels: int = 2
    leaf_split: str = "down"
    data_dir: Optional[str] = None
    out: Optional[str] = None
    background: bool = True
    # hotspot used from the second read phase on (drift experiment)
    drift: Optional[list] = None
    # engine size knobs; None keeps the engine default
    memtable_budget: Optional[int] = None
    sstable_target: Optional[int] = None
    base_level_bytes: Optional[int] = None
    page_size: Optional[int] = None
    pool_pages: Optional[int] = None

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        if self.threads < 1:
            raise AhaError("at least one user thread is required")

    def user_threads(self) -> int:
        """Users plus maintenance threads stay constant across modes."""
        return self.threads + {Mode.AHA: 0, Mode.PURE_LSM: 1, Mode.PURE_BTREE: 2}[self.mode]

    def engine_config(self, data_dir: str) -> EngineConfig:
        extra = {k: getattr(self, k) for k in
                 ("memtable_budget", "sstable_target", "base_level_bytes", "page_size", "pool_pages")
                 if getattr(self, k) is not None}
        return EngineConfig(data_dir=data_dir, mode=self.mode, root_max_levels=self.root_levels,
                            node_max_levels=self.node_levels, leaf_strategy=self.leaf_split,
                            background=self.background, **extra)


@dataclass
class PhaseRecord:
    kind: str
    first_op: int
    ops: int
    wall_s: float
    tput: float
    steady_tput: float
    adapt_complete_op: Optional[int] = None
    adapt_ops: Optional[int] = None
    adapt_s: Optional[float] = None
    scans: int = 0
    nodelsm_probes: int = 0
    sstables_touched: int = 0
    pages_read: int = 0
    entries_emitted: int = 0


@dataclass
class MetricsLog:
    wall_ns: np.ndarray
    state: np.ndarray
    probes: np.ndarray
    phases: list = field(default_factory=list)
    io: dict = field(default_factory=dict)
    engine: dict = field(default_factory=dict)
    divergence: Optional[str] = None
    result_hash: str = ""

    def window_tput(self) -> np.ndarray:
        """Running throughput over the last ``WINDOW`` operations (ops/s)."""
        t = self.wall_ns.astype(np.float64)
        n = len(t)
        out = np.zeros(n)
        if not n:
            return out
        idx = np.arange(n)
        prev = np.where(idx >= WINDOW, idx - WINDOW, -1)
        span = t - np.where(prev >= 0, t[np.maximum(prev, 0)], 0.0)
        count = np.where(prev >= 0, WINDOW, idx + 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(span > 0, count / span * 1e9, 0.0)
        return out

    def write_csv(self, path: str) -> None:
        tput = self.window_tput()
        with open(path, "w") as f:
            f.write(CSV_HEADER + "\n")
            for i in range(len(self.wall_ns)):
                f.write(f"{i},{int(self.wall_ns[i])},{tput[i]:.1f},"
                        f"{STATE_NAMES[int(self.state[i])]},{int(self.probes[i])}\n")

    def summary(self) -> dict:
        return {
            "phases": [asdict(p) for p in self.phases],
            "io": self.io,
            "engine": self.engine,
            "write_amplification": self.io.get("write_amplification"),
            "divergence": self.divergence,
            "result_hash": self.result_hash,
        }

    def write_summary(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2, default=str)

    def phase(self, kind: str, nth: int = 0) -> PhaseRecord:
        return [p for p in self.phases if p.kind == kind][nth]


class Oracle:
    """Dense ordered map over the key universe: latest value version per key (-1 absent)."""

    def __init__(self, key_count: int) -> None:
        self.version = np.full(key_count, -1, dtype=np.int64)

    def apply(self, batch: OpBatch) -> None:
        if batch.kind is PhaseKind.READ:
            return
        keys = batch.keys[::-1]
        vals = batch.versions[::-1]
        uk, first = np.unique(keys, return_index=True)
        # position of the last write per key in the original order
        self.version[uk] = vals[first]

    def expected(self, spec: WorkloadSpec, lo: int, hi: int) -> list:
        hi = min(hi, len(self.version))
        vs = self.version[lo:hi]
        return [(spec.key(lo + int(i)), spec.value(int(vs[i]))) for i in np.nonzero(vs >= 0)[0]]


class _Worker:
    def __init__(self, eng: AhaEngine, spec: WorkloadSpec, batch: OpBatch, positions: np.ndarray,
                 wall: np.ndarray, state: np.ndarray, probes: np.ndarray, t0: int,
                 oracle: Optional[Oracle]) -> None:
        self.eng = eng
        self.spec = spec
        self.batch = batch
        self.positions = positions
        self.wall = wall
        self.state = state
        self.probes = probes
        self.t0 = t0
        self.oracle = oracle
        self.qs = QueryStats()
        self.scans = 0
        self.divergence: Optional[tuple[int, str]] = None
        self.error: Optional[BaseException] = None
        self.digest = 0

    def __call__(self) -> None:
        try:
            self._run()
        except BaseException as exc:  # reported by the runner
            log.exception("worker failed")
            self.error = exc

    def _run(self) -> None:
        eng, spec, b = self.eng, self.spec, self.batch
        key, value = spec.key, spec.value
        clock = time.perf_counter_ns
        codes = STATE_CODES
        qs = self.qs
        digest = 0
        for pos in self.positions:
            op = b.ops[pos]
            k = int(b.keys[pos])
            probes = 0
            if op == OP_SCAN:
                before = qs.nodelsm_probes
                res = eng.range(key(k), key(k + b.scan_len), qs)
                probes = qs.nodelsm_probes - before
                self.scans += 1
                digest = (digest + _crc(res) * (int(pos) + 1)) & 0xFFFFFFFFFFFF
                if self.oracle is not None and self.divergence is None:
                    exp = self.oracle.expected(spec, k, k + b.scan_len)
                    if res != exp:
                        self.divergence = (int(pos), _diff(k, k + b.scan_len, res, exp))
            elif op == OP_PUT:
                eng.put(key(k), value(int(b.versions[pos])))
            else:
                eng.delete(key(k))
            self.wall[pos] = clock() - self.t0
            self.state[pos] = codes[eng.state()]
            self.probes[pos] = probes
        self.digest = digest


def _crc(pairs: list) -> int:
    c = 0
    for k, v in pairs:
        c = zlib.crc32(v, zlib.crc32(k, c))
    return c


def _diff(lo: int, hi: int, got: list, exp: list) -> str:
    g = dict(got)
    e = dict(exp)
    for k in sorted(set(g) | set(e)):
        if g.get(k) != e.get(k):
            return (f"scan [{lo},{hi}): key {k.decode()} engine={_short(g.get(k))} "
                    f"oracle={_short(e.get(k))}")
    return f"scan [{lo},{hi}): ordering differs"


def _short(v: Optional[bytes]) -> str:
    if v is None:
        return "absent"
    return v.decode(errors="replace").lstrip("0")[:24] or "0"


def _partition(batch: OpBatch, n: int) -> list[np.ndarray]:
    """Writes go by key so per-key order is preserved; scans round-robin."""
    pos = np.arange(len(batch))
    if n == 1:
        return [pos]
    if batch.kind is PhaseKind.READ:
        return [pos[i::n] for i in range(n)]
    owner = batch.keys % n
    return [pos[owner == i] for i in range(n)]


def _signal_for(kind: PhaseKind) -> Signal:
    return Signal.READ_HEAVY if kind is PhaseKind.READ else Signal.WRITE_HEAVY


def _steady(wall: np.ndarray, start_ns: int) -> tuple[float, float, float]:
    """(phase seconds, mean ops/s, ops/s over the last quarter)."""
    n = len(wall)
    if not n:
        return 0.0, 0.0, 0.0
    t = np.sort(wall)
    total = (t[-1] - start_ns) / 1e9
    tput = n / total if total > 0 else 0.0
    q = max(1, n // 4)
    a = t[n - q - 1] if n > q else start_ns
    span = (t[-1] - a) / 1e9
    steady = q / span if span > 0 else 0.0
    return total, tput, steady


def execute(spec: WorkloadSpec, cfg: RunConfig, verify: bool = False,
            fault_after: Optional[int] = None) -> MetricsLog:
    """Run every phase; with ``verify`` compare each scan and the final content to the oracle."""
    own_dir = cfg.data_dir is None
    data_dir = tempfile.mkdtemp(prefix="aha-bench-") if own_dir else cfg.data_dir
    if not own_dir:
        os.makedirs(data_dir, exist_ok=True)
        if os.listdir(data_dir):
            raise AhaError(f"{data_dir}: data directory must be empty")
    batches = phase_batches(spec)
    total = sum(len(b) for b in batches)
    wall = np.zeros(total, dtype=np.int64)
    state = np.zeros(total, dtype=np.int8)
    probes = np.zeros(total, dtype=np.int32)
    oracle = Oracle(spec.key_count) if verify else None
    eng = AhaEngine.open(cfg.engine_config(data_dir))
    if fault_after is not None:
        _install_fault(eng, fault_after)
    metrics = MetricsLog(wall, state, probes)
    eng.set_hotspots(spec.hot_ranges())
    reads_seen = 0
    offset = 0
    digest = 0
    t0 = time.perf_counter_ns()
    try:
        for b in batches:
            if b.kind is PhaseKind.READ:
                if reads_seen and cfg.drift:
                    drifted = WorkloadSpec(**{**_spec_fields(spec), "hotspots": cfg.drift})
                    eng.set_hotspots(drifted.hot_ranges())
                    b = _retarget(b, drifted)
                reads_seen += 1
            eng.transition(_signal_for(b.kind))
            n = len(b)
            pw = wall[offset:offset + n]
            ps = state[offset:offset + n]
            pp = probes[offset:offset + n]
            start = time.perf_counter_ns() - t0
            workers = [_Worker(eng, spec, b, part, pw, ps, pp, t0, oracle)
                       for part in _partition(b, cfg.user_threads()) if len(part)]
            if len(workers) == 1:
                workers[0]()
            else:
                threads = [threading.Thread(target=w, name=f"user-{i}") for i, w in enumerate(workers)]
                for t in threads:
                    t.start()
                for t in threads:
                    t.join()
            for w in workers:
                if w.error is not None:
                    raise AhaError(f"phase {b.phase} ({b.kind.value}) failed") from w.error
            if verify:
                divs = sorted(w.divergence for w in workers if w.divergence is not None)
                if divs and metrics.divergence is None:
                    pos, msg = divs[0]
                    metrics.divergence = f"phase {b.phase} ({b.kind.value}) op {offset + pos}: {msg}"
                oracle.apply(b)
            # worker digests are position-weighted sums, so any partition gives the same total
            phase_digest = sum(w.digest for w in workers) & 0xFFFFFFFFFFFF
            digest = (digest * 1_000_003 + phase_digest) & 0xFFFFFFFFFFFF
            metrics.phases.append(_phase_record(b, offset, start, pw, ps, workers))
            offset += n
        eng.transition(Signal.WRITE_HEAVY)
        if verify and metrics.divergence is None:
            metrics.divergence = _final_check(eng, spec, oracle)
        # settle outstanding flushes and compactions so every mode pays its full write cost
        eng.wait_idle()
        metrics.io = eng.io.snapshot()
        metrics.engine = eng.stats()
        metrics.result_hash = f"{digest:012x}:{_content_hash(eng, spec):016x}"
    finally:
        try:
            eng.close()
        finally:
            if own_dir:
                shutil.rmtree(data_dir, ignore_errors=True)
    if cfg.out:
        metrics.write_csv(cfg.out)
        metrics.write_summary(cfg.out + ".summary.json")
    return metrics


def _spec_fields(spec: WorkloadSpec) -> dict:
    return {k: getattr(spec, k) for k in spec.__dataclass_fields__}


def _retarget(batch: OpBatch, drifted: WorkloadSpec) -> OpBatch:
    return gen_ops(drifted, batch.phase)


def _phase_record(b: OpBatch, offset: int, start: int, pw, ps, workers) -> PhaseRecord:
    wall_s, tput, steady = _steady(pw, start)
    rec = PhaseRecord(b.kind.value, offset, len(b), wall_s, tput, steady)
    if b.kind is PhaseKind.READ:
        order = np.argsort(pw, kind="stable")
        hit = np.nonzero(ps[order] == STATE_CODES[EngineState.R])[0]
        if len(hit):
            rec.adapt_ops = int(hit[0]) + 1
            rec.adapt_complete_op = offset + rec.adapt_ops - 1
            rec.adapt_s = (int(pw[order[hit[0]]]) - start) / 1e9
    for w in workers:
        rec.scans += w.scans
        rec.nodelsm_probes += w.qs.nodelsm_probes
        rec.sstables_touched += w.qs.sstables_touched
        rec.pages_read += w.qs.pages_read
        rec.entries_emitted += w.qs.entries_emitted
    return rec


def _final_check(eng: AhaEngine, spec: WorkloadSpec, oracle: Oracle, chunk: int = 50_000) -> Optional[str]:
    for lo in range(0, spec.key_count, chunk):
        hi = min(spec.key_count, lo + chunk)
        got = eng.range(spec.key(lo), spec.key(hi))
        exp = oracle.expected(spec, lo, hi)
        if got != exp:
            return "final content: " + _diff(lo, hi, got, exp)
    return None


def _content_hash(eng: AhaEngine, spec: WorkloadSpec, chunk: int = 50_000) -> int:
    h = 0
    for lo in range(0, spec.key_count, chunk):
        got = eng.range(spec.key(lo), spec.key(min(spec.key_count, lo + chunk)))
        h = (h * 1_000_003 + _crc(got)) & 0xFFFFFFFFFFFFFFFF
    return h


def _install_fault(eng: AhaEngine, after: int) -> None:
    """Negative control: drop the install of the ``after``-th flush."""
    seen = [0]

    def hook(kind: str) -> bool:
        if kind != "flush":
            return False
        seen[0] += 1
        return seen[0] == after

    eng.fault_hook = hook


def run(spec: WorkloadSpec, cfg: RunConfig) -> MetricsLog:
    return execute(spec, cfg)


def verify(spec: WorkloadSpec, cfg: RunConfig, fault_after: Optional[int] = None) -> MetricsLog:
    return execute(spec, cfg, verify=True, fault_after=fault_after)
