"""Shared domain types: simulator status machine, trap errors, traces, models."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "MODE",
    "Status",
    "SimulatorStatus",
    "ZeroHandled",
    "LimboEntered",
    "RecoveredSafe",
    "UnsafeEntered",
    "IllegalTransition",
    "TrapKind",
    "TrapError",
    "TimeRegression",
    "UndeclaredWrite",
    "transition",
    "Sample",
    "EventRecord",
    "Trace",
    "record",
    "EventAction",
    "Detector",
    "HybridModel",
]

# Pseudo-variable key for the active mode in read/write sets and assignments.
MODE = "mode"


class Status(enum.Enum):
    SAFE = "safe"
    LIMBO = "limbo"
    UNSAFE = "unsafe"


class TrapKind(enum.Enum):
    UNSAFE_LEVEL_CROSSED = "UnsafeLevelCrossed"
    UNHANDLED_SIMULTANEITY = "UnhandledSimultaneity"
    UNHANDLED_LIMBO = "UnhandledLimbo"
    NON_FINITE_STATE = "NonFiniteState"


class TrapError(Exception):
    """A simulation error caught at the instant it happened.

    ``time`` is the localized time of the offending condition, never the end
    of the step in which it was found. ``detail`` is a plain mapping (detector
    id, contested variables, ...) so it serializes without help.
    """

    def __init__(self, kind: TrapKind, time: float, detail: Optional[Mapping[str, Any]] = None):
        self.kind = kind
        self.time = float(time)
        self.detail = dict(detail or {})
        super().__init__(f"{kind.value} at t={self.time!r} {self.detail}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrapError):
            return NotImplemented
        return (self.kind, self.time, self.detail) == (other.kind, other.time, other.detail)

    def __hash__(self) -> int:
        return hash((self.kind, self.time))

    def __reduce__(self):
        return (TrapError, (self.kind, self.time, self.detail))


class IllegalTransition(RuntimeError):
    """A status change that is not an edge of the safe/limbo/unsafe machine.

    Raised only for engine bugs; models cannot provoke it.
    """


class TimeRegression(ValueError):
    pass


class UndeclaredWrite(RuntimeError):
    """An action assigned a variable outside its declared write set."""


@dataclass(frozen=True)
class SimulatorStatus:
    tag: Status = Status.SAFE
    limbo_since: Optional[float] = None
    trap: Optional[TrapError] = None

    def __post_init__(self):
        if (self.tag is Status.LIMBO) != (self.limbo_since is not None):
            raise ValueError("limbo_since must be set exactly when tag is LIMBO")
        if (self.tag is Status.UNSAFE) != (self.trap is not None):
            raise ValueError("trap must be set exactly when tag is UNSAFE")


@dataclass(frozen=True)
class ZeroHandled:
    pass


@dataclass(frozen=True)
class LimboEntered:
    time: float = 0.0


@dataclass(frozen=True)
class RecoveredSafe:
    pass


@dataclass(frozen=True)
class UnsafeEntered:
    trap: TrapError


def transition(status: SimulatorStatus, event) -> SimulatorStatus:
    """Advance the simulator status along one of the edges a, b, c, d.

    a: safe -> safe on a handled zero crossing; b: safe -> limbo;
    c: limbo -> safe on recovery; d: limbo -> unsafe with a trap.
    Anything else raises :class:`IllegalTransition`.
    """
    tag = status.tag
    if tag is Status.SAFE and isinstance(event, ZeroHandled):
        return status
    if tag is Status.SAFE and isinstance(event, LimboEntered):
        return SimulatorStatus(Status.LIMBO, limbo_since=event.time)
    if tag is Status.LIMBO and isinstance(event, RecoveredSafe):
        return SimulatorStatus(Status.SAFE)
    if tag is Status.LIMBO and isinstance(event, UnsafeEntered):
        return SimulatorStatus(Status.UNSAFE, trap=event.trap)
    raise IllegalTransition(f"no edge from {tag.value} on {type(event).__name__}")


@dataclass(frozen=True)
class Sample:
    time: float
    state: tuple
    status: Status
    mode: str


@dataclass(frozen=True)
class EventRecord:
    time: float
    kind: str
    source: str
    # (variable name, pre value, post value) per assignment, in application order
    writes: tuple = ()


@dataclass
class Trace:
    """Time-ordered samples plus the event log.

    At an event instant the trace holds exactly two samples with the same
    time, one before and one after the event, with the event logged between
    them.
    """

    names: tuple
    samples: list = field(default_factory=list)
    events: list = field(default_factory=list)
    _events_since_sample: int = field(default=0, repr=False, compare=False)

    def record(self, time: float, state: Iterable[float], status: Status, mode: str) -> "Trace":
        time = float(time)
        state = tuple(float(v) for v in state)
        if len(state) != len(self.names):
            raise ValueError(f"state has {len(state)} entries, expected {len(self.names)}")
        if self.samples:
            last = self.samples[-1].time
            if time < last:
                raise TimeRegression(f"sample at t={time!r} precedes last sample t={last!r}")
            if time == last:
                paired = len(self.samples) >= 2 and self.samples[-2].time == time
                if paired or self._events_since_sample == 0:
                    raise TimeRegression(
                        f"repeated sample time t={time!r} without an intervening event")
        self.samples.append(Sample(time, state, status, mode))
        self._events_since_sample = 0
        return self

    def log(self, time: float, kind: str, source: str, writes: Sequence = ()) -> None:
        if self.samples and float(time) < self.samples[-1].time:
            raise TimeRegression(f"event at t={time!r} precedes last sample")
        self.events.append(EventRecord(float(time), kind, source, tuple(writes)))
        self._events_since_sample += 1

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.samples])

    def column(self, name: str) -> np.ndarray:
        i = self.names.index(name)
        return np.array([s.state[i] for s in self.samples])

    def validate(self) -> None:
        """Replay the trace and raise ``ValueError`` on any broken invariant."""
        samples = self.samples
        for k in range(1, len(samples)):
            if samples[k].time < samples[k - 1].time:
                raise ValueError(f"time regression at sample {k}")
            if samples[k].time == samples[k - 1].time:
                if k >= 2 and samples[k - 2].time == samples[k].time:
                    raise ValueError(f"more than two samples at t={samples[k].time!r}")
                if not any(e.time == samples[k].time for e in self.events):
                    raise ValueError(f"sample pair at t={samples[k].time!r} has no event")
        by_time: dict = {}
        for s in samples:
            by_time.setdefault(s.time, []).append(s)
        for ev in self.events:
            if not ev.writes:
                continue
            at = by_time.get(ev.time, [])
            if len(at) == 1 and at[0] is samples[-1]:
                continue  # run trapped before the post-event sample
            if len(at) != 2:
                raise ValueError(f"event {ev.kind}@{ev.time!r} lacks a pre/post sample pair")
        for t, pair in by_time.items():
            if len(pair) != 2:
                continue
            pre, post = pair
            first: dict = {}
            last: dict = {}
            for ev in self.events:
                if ev.time != t:
                    continue
                for name, a, b in ev.writes:
                    first.setdefault(name, a)
                    last[name] = b
            for name in last:
                if name == MODE:
                    if post.mode != last[name] or pre.mode != first[name]:
                        raise ValueError(f"mode switch at t={t!r} not reflected in samples")
                    continue
                i = self.names.index(name)
                if post.state[i] != last[name] or pre.state[i] != first[name]:
                    raise ValueError(f"reinit of {name} at t={t!r} not reflected in samples")


def record(trace: Trace, time: float, state, status: Status, mode: str) -> Trace:
    return trace.record(time, state, status, mode)


@dataclass(frozen=True)
class EventAction:
    """A reinit-style action.

    ``apply(t, pre)`` returns ``(index, value)`` assignments computed from the
    pre-event state only. Indices are state positions or :data:`MODE`.
    """

    reads: frozenset
    writes: frozenset
    apply: Callable[[float, np.ndarray], list]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "reads", frozenset(self.reads))
        object.__setattr__(self, "writes", frozenset(self.writes))

    def assignments(self, t: float, pre: np.ndarray) -> list:
        out = list(self.apply(t, pre))
        for idx, _ in out:
            if idx not in self.writes:
                raise UndeclaredWrite(
                    f"action {self.name or '?'} assigned {idx!r} outside write set "
                    f"{sorted(self.writes, key=str)}")
        return out


@dataclass(frozen=True)
class Detector:
    # config is a hybridsafe.detect.DetectorConfig; kept untyped to avoid a cycle
    config: Any
    guard: Callable[[float, np.ndarray], float]
    action: Optional[EventAction] = None

    @property
    def id(self) -> str:
        return self.config.id


@dataclass(frozen=True)
class HybridModel:
    names: tuple
    modes: Mapping[str, Callable[[float, np.ndarray], np.ndarray]]
    initial_state: tuple
    initial_mode: str
    detectors: tuple
    combined_handlers: Mapping[frozenset, EventAction] = field(default_factory=dict)
    limbo_handlers: Mapping[str, EventAction] = field(default_factory=dict)
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "initial_state", tuple(float(v) for v in self.initial_state))
        object.__setattr__(self, "detectors", tuple(self.detectors))
        if len(self.initial_state) != len(self.names):
            raise ValueError("initial_state length does not match variable names")
        if not all(math.isfinite(v) for v in self.initial_state):
            raise ValueError("initial_state must be finite")
        if self.initial_mode not in self.modes:
            raise ValueError(f"unknown initial mode {self.initial_mode!r}")
        ids = [d.id for d in self.detectors]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate detector ids: {ids}")
        allowed = set(range(len(self.names))) | {MODE}
        actions = [d.action for d in self.detectors if d.action is not None]
        actions += list(self.combined_handlers.values()) + list(self.limbo_handlers.values())
        for a in actions:
            if not (a.reads <= allowed and a.writes <= allowed):
                raise ValueError(f"action {a.name!r} touches variables outside the model")
        for key in self.combined_handlers:
            if not set(key) <= set(ids):
                raise ValueError(f"combined handler for unknown detectors {sorted(key)}")
        for key in self.limbo_handlers:
            if key not in ids:
                raise ValueError(f"limbo handler for unknown detector {key!r}")

    @property
    def n_states(self) -> int:
        return len(self.names)

    def detector(self, det_id: str) -> Detector:
        for d in self.detectors:
            if d.id == det_id:
                return d
        raise KeyError(det_id)

    def var_name(self, idx) -> str:
        return MODE if idx == MODE else self.names[idx]
