"""Deterministic operation streams for the oscillating read/write workloads."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from ..storage import InputError

OP_PUT = 0
OP_DELETE = 1
OP_SCAN = 2


class Distribution(enum.Enum):
    UNIFORM = "uniform"
    ZIPF = "zipf"


class PhaseKind(enum.Enum):
    LOAD = "load"
    READ = "read"
    WRITE = "write"


DEFAULT_HOT_FRACTION = {Distribution.UNIFORM: 0.10, Distribution.ZIPF: 0.01}
DEFAULT_SELECTIVITY = {Distribution.UNIFORM: 2e-6, Distribution.ZIPF: 2e-7}


@dataclass
class Phase:
    kind: PhaseKind
    ops: int


@dataclass
class WorkloadSpec:
    distribution: Distribution = Distribution.UNIFORM
    theta: float = 0.99
    key_count: int = 2_000_000
    key_len: int = 20
    value_len: int = 128
    # (origin, size) as fractions of the keyspace
    hotspots: list = field(default_factory=list)
    selectivity: Optional[float] = None
    phases: list = field(default_factory=list)
    seed: int = 42
    hot_writes: bool = False
    delete_frac: float = 0.0

    def __post_init__(self) -> None:
        self.distribution = Distribution(self.distribution)
        if not self.hotspots:
            self.hotspots = [(0.0, DEFAULT_HOT_FRACTION[self.distribution])]
        if self.selectivity is None:
            self.selectivity = DEFAULT_SELECTIVITY[self.distribution]
        if not self.phases:
            self.phases = [Phase(PhaseKind.LOAD, self.key_count)]
        self.phases = [p if isinstance(p, Phase) else Phase(PhaseKind(p[0]), int(p[1]))
                       for p in self.phases]
        if self.key_count < 1:
            raise InputError("key_count must be positive")
        if len(str(self.key_count)) > self.key_len:
            raise InputError("key_len too short for key_count")
        if not 0 < self.selectivity <= 1:
            raise InputError("selectivity must be in (0, 1]")
        if not 0 <= self.delete_frac < 1:
            raise InputError("delete_frac must be in [0, 1)")
        for origin, frac in self.hotspots:
            if not 0 < frac <= 1 or not 0 <= origin < 1:
                raise InputError(f"bad hotspot {origin}:{frac}")
        spans = sorted(self.hot_spans())
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise InputError("hotspots overlap")

    def hot_spans(self) -> list[tuple[int, int]]:
        """Hotspots as half-open key index ranges."""
        out = []
        for origin, frac in self.hotspots:
            lo = int(origin * self.key_count)
            hi = min(self.key_count, lo + max(1, math.ceil(frac * self.key_count)))
            out.append((lo, hi))
        return out

    def hot_ranges(self) -> list[tuple[bytes, bytes]]:
        return [(self.key(lo), self.key(hi)) for lo, hi in self.hot_spans()]

    @property
    def scan_len(self) -> int:
        return max(1, round(self.selectivity * self.key_count))

    def key(self, i: int) -> bytes:
        return str(i).zfill(self.key_len).encode()

    def value(self, version: int) -> bytes:
        return str(version).zfill(self.value_len).encode()


def parse_phases(text: str) -> list[Phase]:
    out = []
    for part in text.split(","):
        kind, _, n = part.partition(":")
        try:
            out.append(Phase(PhaseKind(kind.strip()), int(float(n))))
        except ValueError:
            raise InputError(f"bad phase {part!r}") from None
    if not out:
        raise InputError("no phases")
    return out


def parse_hotspots(text: str) -> list[tuple[float, float]]:
    out = []
    for part in text.split(","):
        lo, _, frac = part.partition(":")
        try:
            out.append((float(lo), float(frac)))
        except ValueError:
            raise InputError(f"bad hotspot {part!r}") from None
    return out


@lru_cache(maxsize=8)
def _zipf_cdf(n: int, theta: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -theta
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    return cdf


def zipf_ranks(rng: np.random.Generator, n: int, theta: float, size: int) -> np.ndarray:
    """Bounded Zipf draws over ranks ``0..n-1`` (rank 0 most frequent)."""
    cdf = _zipf_cdf(n, theta)
    idx = np.searchsorted(cdf, rng.random(size), side="right")
    return np.minimum(idx, n - 1)


@dataclass
class OpBatch:
    """One phase's operations as parallel arrays; versions index deterministic values."""

    phase: int
    kind: PhaseKind
    ops: np.ndarray      # OP_* codes
    keys: np.ndarray     # key index (scan start for scans)
    versions: np.ndarray  # value version for puts, -1 otherwise
    scan_len: int

    def __len__(self) -> int:
        return len(self.ops)


def gen_ops(spec: WorkloadSpec, phase_index: int, version_base: int = 0) -> OpBatch:
    """The operation stream of one phase; identical for identical inputs."""
    phase = spec.phases[phase_index]
    rng = np.random.default_rng([spec.seed, phase_index])
    n = phase.ops
    versions = np.full(n, -1, dtype=np.int64)
    if phase.kind is PhaseKind.LOAD:
        if n > spec.key_count:
            raise InputError("a load phase cannot insert more keys than the keyspace holds")
        keys = rng.permutation(spec.key_count)[:n].astype(np.int64)
        ops = np.full(n, OP_PUT, dtype=np.int8)
        versions = version_base + np.arange(n, dtype=np.int64)
        return OpBatch(phase_index, phase.kind, ops, keys, versions, 0)
    if phase.kind is PhaseKind.READ:
        keys = _hot_starts(spec, rng, n)
        ops = np.full(n, OP_SCAN, dtype=np.int8)
        return OpBatch(phase_index, phase.kind, ops, keys, versions, spec.scan_len)
    if spec.hot_writes:
        keys = _hot_starts(spec, rng, n, width=1)
    elif spec.distribution is Distribution.ZIPF:
        keys = zipf_ranks(rng, spec.key_count, spec.theta, n).astype(np.int64)
    else:
        keys = rng.integers(0, spec.key_count, n, dtype=np.int64)
    ops = np.where(rng.random(n) < spec.delete_frac, OP_DELETE, OP_PUT).astype(np.int8)
    versions = np.where(ops == OP_PUT, version_base + np.arange(n, dtype=np.int64), -1)
    return OpBatch(phase_index, phase.kind, ops, keys, versions, 0)


def _hot_starts(spec: WorkloadSpec, rng: np.random.Generator, n: int,
                width: Optional[int] = None) -> np.ndarray:
    """Start indices such that ``[start, start + width)`` lies inside one hotspot."""
    width = spec.scan_len if width is None else width
    spans = spec.hot_spans()
    which = rng.integers(0, len(spans), n)
    out = np.empty(n, dtype=np.int64)
    for h, (lo, hi) in enumerate(spans):
        mask = which == h
        m = int(mask.sum())
        if not m:
            continue
        room = max(1, hi - lo - width + 1)
        if spec.distribution is Distribution.ZIPF:
            off = zipf_ranks(rng, room, spec.theta, m)
        else:
            off = rng.integers(0, room, m)
        out[mask] = lo + off
    return out


def phase_batches(spec: WorkloadSpec) -> list[OpBatch]:
    batches = []
    base = 0
    for i in range(len(spec.phases)):
        b = gen_ops(spec, i, base)
        base += len(b)
        batches.append(b)
    return batches
