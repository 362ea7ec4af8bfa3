"""Workload harness for oscillating read/write phases."""

from .runner import MetricsLog, RunConfig, execute, run, verify
from .workload import Distribution, PhaseKind, WorkloadSpec, gen_ops

__all__ = ["Distribution", "MetricsLog", "PhaseKind", "RunConfig", "WorkloadSpec", "execute",
           "gen_ops", "run", "verify"]
