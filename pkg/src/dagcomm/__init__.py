"""Simulated data-parallel training with collectives embedded in a dependency engine."""

from .collective import (
    CollectiveError,
    DeadlockTimeout,
    MismatchError,
    Transport,
    TransportAborted,
    UsageError,
    create_transport,
)
from .engine import Engine, EngineShutdown, Tag, new_engine
from .kvstore import GradientSlot, KVStore, KVStoreConfig
from .trace import TraceSink

__all__ = [
    "CollectiveError", "DeadlockTimeout", "MismatchError", "Transport", "TransportAborted",
    "UsageError", "create_transport", "Engine", "EngineShutdown", "Tag", "new_engine",
    "GradientSlot", "KVStore", "KVStoreConfig", "TraceSink",
]
