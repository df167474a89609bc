"""Hybrid simulation with trapped zero-crossing and simultaneity errors."""

from .core import (
    MODE,
    EventAction,
    Detector,
    HybridModel,
    SimulatorStatus,
    Status,
    Trace,
    TrapError,
    TrapKind,
    transition,
)
from .detect import DetectorConfig, Direction, NaiveKind, SafeKind
from .engine import EngineConfig, EventBatch, Safety, SimOutcome, Verdict, simulate
from .integrate import StepConfig
from .models import bouncing_ball, elastic_velocities, three_balls

__version__ = "0.1.0"
