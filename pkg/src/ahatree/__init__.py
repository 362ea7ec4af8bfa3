"""Adaptive hybrid key-value index that moves hotspot ranges between LSM and B+tree layouts."""

from .adapt import EngineState, HotspotSet, LeafStrategy, Signal
from .engine import AhaEngine, EngineConfig, Mode, QueryStats, open_engine
from .storage import AhaError, CorruptionError, InputError

__all__ = [
    "AhaEngine", "AhaError", "CorruptionError", "EngineConfig", "EngineState", "HotspotSet",
    "InputError", "LeafStrategy", "Mode", "QueryStats", "Signal", "open_engine",
]
