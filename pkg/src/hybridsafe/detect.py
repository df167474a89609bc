"""Directional level-crossing detectors.

Two flavours:

* ``NaiveKind`` - a single zero level with re-arm hysteresis. After firing,
  the detector stays disarmed until the guard climbs back past
  ``level + arm_threshold``; a bounce too small to clear that band is never
  seen, which is exactly how a ball tunnels through the floor.
* ``SafeKind`` - zero, limbo and unsafe levels stacked along the crossing
  direction, splitting guard space into safe, limbo and unsafe regions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import List, Tuple, Union

from .integrate import Direction

__all__ = [
    "Direction",
    "NaiveKind",
    "SafeKind",
    "DetectorConfig",
    "Region",
    "DetectorEvent",
    "DetectorState",
    "classify_region",
    "thresholds",
    "check_safe",
    "check_naive",
]

DEFAULT_LIMBO_OFFSET = 1e-4
DEFAULT_UNSAFE_OFFSET = 1e-2
DEFAULT_ARM_THRESHOLD = 1e-7


@dataclass(frozen=True)
class NaiveKind:
    arm_threshold: float = DEFAULT_ARM_THRESHOLD

    def __post_init__(self):
        if not self.arm_threshold > 0:
            raise ValueError("arm_threshold must be positive")


@dataclass(frozen=True)
class SafeKind:
    limbo_offset: float = DEFAULT_LIMBO_OFFSET
    unsafe_offset: float = DEFAULT_UNSAFE_OFFSET

    def __post_init__(self):
        if not (self.limbo_offset > 0 and self.unsafe_offset > 0):
            raise ValueError("limbo_offset and unsafe_offset must be positive")


@dataclass(frozen=True)
class DetectorConfig:
    id: str
    level: float = 0.0
    direction: Direction = Direction.FALLING
    kind: Union[NaiveKind, SafeKind] = SafeKind()

    @property
    def is_safe(self) -> bool:
        return isinstance(self.kind, SafeKind)

    def with_offsets(self, limbo_offset=None, unsafe_offset=None) -> "DetectorConfig":
        if not self.is_safe:
            return self
        kind = SafeKind(
            self.kind.limbo_offset if limbo_offset is None else limbo_offset,
            self.kind.unsafe_offset if unsafe_offset is None else unsafe_offset,
        )
        return replace(self, kind=kind)


class Region(enum.Enum):
    SAFE = "safe"
    LIMBO = "limbo"
    UNSAFE = "unsafe"


class DetectorEvent(enum.Enum):
    ZERO_CROSSED = "zero-crossed"
    LIMBO_ENTERED = "limbo-entered"
    UNSAFE_ENTERED = "unsafe-entered"
    LIMBO_EXITED = "limbo-exited"


@dataclass(frozen=True)
class DetectorState:
    armed: bool = True
    region: Region = Region.SAFE


def thresholds(cfg: DetectorConfig) -> Tuple[float, float, float]:
    """(zero, limbo, unsafe) levels in crossing order."""
    a, b = cfg.kind.limbo_offset, cfg.kind.unsafe_offset
    sign = -1.0 if cfg.direction is Direction.FALLING else 1.0
    return cfg.level, cfg.level + sign * a, cfg.level + sign * (a + b)


def _past(value: float, level: float, direction: Direction) -> bool:
    if direction is Direction.FALLING:
        return value <= level
    return value >= level


def classify_region(value: float, cfg: DetectorConfig) -> Region:
    if not cfg.is_safe:
        raise TypeError("classify_region needs a SafeKind detector")
    _, limbo, unsafe = thresholds(cfg)
    if _past(value, unsafe, cfg.direction):
        return Region.UNSAFE
    if _past(value, limbo, cfg.direction):
        return Region.LIMBO
    return Region.SAFE


def level_for(cfg: DetectorConfig, event: DetectorEvent) -> Tuple[float, Direction]:
    """The level and crossing direction that produce ``event``."""
    if event is DetectorEvent.ZERO_CROSSED:
        return cfg.level, cfg.direction
    _, limbo, unsafe = thresholds(cfg)
    if event is DetectorEvent.LIMBO_ENTERED:
        return limbo, cfg.direction
    if event is DetectorEvent.UNSAFE_ENTERED:
        return unsafe, cfg.direction
    back = Direction.RISING if cfg.direction is Direction.FALLING else Direction.FALLING
    return limbo, back


def crossed_event(cfg: DetectorConfig, event: DetectorEvent, value: float) -> bool:
    """Whether ``value`` lies on the far side of the level that yields ``event``."""
    level, _ = level_for(cfg, event)
    if event is DetectorEvent.LIMBO_EXITED:
        return not _past(value, level, cfg.direction)
    return _past(value, level, cfg.direction)


def check_safe(cfg: DetectorConfig, pre_value: float, post_value: float) -> List[DetectorEvent]:
    """Events for every level passed between two guard evaluations.

    Levels passed along the crossing direction are reported in crossing
    order. Returning from limbo (or beyond) to the safe region reports
    ``LIMBO_EXITED``. Unsafe entry is only reported here; trapping it is the
    engine's job.
    """
    if not cfg.is_safe:
        raise TypeError("check_safe needs a SafeKind detector")
    d = cfg.direction
    events = []
    for level, ev in zip(thresholds(cfg), (DetectorEvent.ZERO_CROSSED,
                                           DetectorEvent.LIMBO_ENTERED,
                                           DetectorEvent.UNSAFE_ENTERED)):
        if not _past(pre_value, level, d) and _past(post_value, level, d):
            events.append(ev)
    if (classify_region(pre_value, cfg) is not Region.SAFE
            and classify_region(post_value, cfg) is Region.SAFE):
        events.append(DetectorEvent.LIMBO_EXITED)
    return events


def check_naive(cfg: DetectorConfig, state: DetectorState,
                pre_value: float, post_value: float) -> Tuple[bool, DetectorState]:
    """Fire on an armed crossing; re-arm only above the hysteresis band.

    Never raises and never reports a missed crossing.
    """
    if cfg.is_safe:
        raise TypeError("check_naive needs a NaiveKind detector")
    d = cfg.direction
    sign = 1.0 if d is Direction.FALLING else -1.0
    rearm_level = cfg.level + sign * cfg.kind.arm_threshold
    armed = state.armed or _beyond_rearm(pre_value, rearm_level, d)
    fired = armed and not _past(pre_value, cfg.level, d) and _past(post_value, cfg.level, d)
    if fired:
        armed = False
    if not armed and _beyond_rearm(post_value, rearm_level, d):
        armed = True
    return fired, replace(state, armed=armed)


def _beyond_rearm(value: float, rearm_level: float, direction: Direction) -> bool:
    if direction is Direction.FALLING:
        return value > rearm_level
    return value < rearm_level
