"""Simulation main loop with trapped zero crossings and simultaneity analysis.

Each step is integrated with RK4, every detector is checked on the step,
crossings are localized on the Hermite interpolant, and the step is cut at
the earliest cluster of crossings that fall within the simultaneity
tolerance. Everything logged at that instant happens between one pre-event
and one post-event sample.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import (
    MODE,
    EventAction,
    HybridModel,
    LimboEntered,
    RecoveredSafe,
    SimulatorStatus,
    Status,
    Trace,
    TrapError,
    TrapKind,
    UnsafeEntered,
    ZeroHandled,
    transition,
)
from .detect import (
    DetectorEvent,
    DetectorState,
    Region,
    check_naive,
    check_safe,
    classify_region,
    crossed_event,
)
from .integrate import NonFiniteResult, StepConfig, bracket, interpolate, make_segment, step

logger = logging.getLogger(__name__)

_EVENT_RANK = {ev: k for k, ev in enumerate(DetectorEvent)}


class Safety(enum.Enum):
    SAFE = "safe"
    UNSAFE = "unsafe"


class Verdict(enum.Enum):
    INDEPENDENT = "Independent"
    COMBINED_HANDLED = "CombinedHandled"
    CONFLICT = "Conflict"


@dataclass(frozen=True)
class EngineConfig:
    step: StepConfig = field(default_factory=StepConfig)
    t_end: float = 10.0
    simultaneity_tol: Optional[float] = None
    # permutation of detector ids (or declaration indices); None keeps declaration order
    event_order: Optional[tuple] = None
    safety: Safety = Safety.SAFE
    cascade_limit: int = 100

    def __post_init__(self):
        if self.simultaneity_tol is None:
            object.__setattr__(self, "simultaneity_tol", 2.0 * self.step.t_tol)
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if self.simultaneity_tol < 2.0 * self.step.t_tol:
            raise ValueError("simultaneity_tol must be at least 2 * t_tol")
        if self.cascade_limit < 1:
            raise ValueError("cascade_limit must be at least 1")
        if self.event_order is not None:
            object.__setattr__(self, "event_order", tuple(self.event_order))


@dataclass(frozen=True)
class EventBatch:
    t_batch: float
    members: tuple  # ((detector id, localized time), ...)
    verdict: Verdict = Verdict.INDEPENDENT
    contested: tuple = ()  # variable indices read or written by more than one member

    @property
    def ids(self) -> tuple:
        return tuple(m[0] for m in self.members)


@dataclass
class SimOutcome:
    trace: Trace
    status: SimulatorStatus
    batches: list = field(default_factory=list)

    @property
    def trap(self) -> Optional[TrapError]:
        return self.status.trap

    @property
    def terminal(self) -> str:
        return "Trapped" if self.status.tag is Status.UNSAFE else "ReachedTEnd"

    @property
    def reached_t_end(self) -> bool:
        return self.status.tag is not Status.UNSAFE


def analyze_conflicts(actions: Sequence[EventAction]) -> tuple:
    """Variables that make the given actions order-dependent.

    Two actions clash on a variable when both write it, or one writes what
    the other reads.
    """
    contested = set()
    for i, a in enumerate(actions):
        for b in actions[i + 1:]:
            contested |= a.writes & b.writes
            contested |= a.writes & b.reads
            contested |= b.writes & a.reads
    return tuple(sorted(contested, key=_var_key))


def _var_key(idx):
    return (1, 0) if idx == MODE else (0, idx)


def _verdict(ids: Sequence[str], actions: Mapping[str, EventAction],
             combined: Mapping[frozenset, EventAction]) -> Tuple[Verdict, tuple]:
    contested = analyze_conflicts([actions[i] for i in ids if i in actions])
    if not contested:
        return Verdict.INDEPENDENT, ()
    if frozenset(ids) in combined:
        return Verdict.COMBINED_HANDLED, contested
    return Verdict.CONFLICT, contested


def batch_events(crossings: Sequence[Tuple[str, float]], tol: float,
                 actions: Optional[Mapping[str, EventAction]] = None,
                 combined: Optional[Mapping[frozenset, EventAction]] = None) -> List[EventBatch]:
    """Greedy clustering of time-sorted crossings into simultaneous batches.

    A crossing joins the open batch when it lies within ``tol`` of the
    batch's earliest member; otherwise it opens a new one.
    """
    actions = actions or {}
    combined = combined or {}
    groups: list = []
    for det_id, t in crossings:
        if groups and t - groups[-1][0][1] <= tol:
            groups[-1].append((det_id, t))
        else:
            if groups and t < groups[-1][0][1]:
                raise ValueError("crossings must be sorted by time")
            groups.append([(det_id, t)])
    out = []
    for g in groups:
        verdict, contested = _verdict([m[0] for m in g], actions, combined)
        out.append(EventBatch(g[0][1], tuple(g), verdict, contested))
    return out


def _model_batch(model: HybridModel, members: Sequence[Tuple[str, float]]) -> EventBatch:
    actions = {d.id: d.action for d in model.detectors if d.action is not None}
    t_batch = min(t for _, t in members)
    verdict, contested = _verdict([m[0] for m in members], actions, model.combined_handlers)
    return EventBatch(t_batch, tuple(members), verdict, contested)


def _assignments(model: HybridModel, det_id: str, t: float, pre_state) -> list:
    action = model.detector(det_id).action
    return [] if action is None else action.assignments(t, pre_state)


def _resolve_groups(batch: EventBatch, model: HybridModel, t: float,
                    pre_state: np.ndarray) -> list:
    """Per-source assignment groups ``(kind, source, assignments)``."""
    if len(batch.members) == 1 or batch.verdict is Verdict.INDEPENDENT:
        return [("zero-crossed", det_id, _assignments(model, det_id, t, pre_state))
                for det_id in batch.ids]
    key = frozenset(batch.ids)
    handler = model.combined_handlers.get(key)
    if handler is None:
        raise TrapError(TrapKind.UNHANDLED_SIMULTANEITY, t, {
            "detectors": list(batch.ids),
            "contested": [model.var_name(i) for i in batch.contested],
        })
    return [("combined", "+".join(sorted(key)), handler.assignments(t, pre_state))]


def resolve_batch(batch: EventBatch, model: HybridModel, t: float, pre_state) -> list:
    """Assignments for a batch, or :class:`TrapError` for an unhandled conflict.

    All actions read ``pre_state``; independent members commute, so their
    assignments are simply pooled.
    """
    pre_state = np.asarray(pre_state, dtype=float)
    out = []
    for _, _, assignments in _resolve_groups(batch, model, t, pre_state):
        out.extend(assignments)
    return out


def _ordered_ids(ids: Sequence[str], model: HybridModel, order) -> list:
    declared = [d.id for d in model.detectors]
    if order is None:
        rank = {d: k for k, d in enumerate(declared)}
    else:
        seq = [declared[o] if isinstance(o, int) else o for o in order]
        rank = {d: k for k, d in enumerate(seq)}
        for d in declared:
            rank.setdefault(d, len(rank) + declared.index(d))
    return sorted(ids, key=lambda d: rank[d])


def _unsafe_groups(batch: EventBatch, model: HybridModel, t: float, pre_state, order) -> list:
    return [("zero-crossed", det_id, _assignments(model, det_id, t, pre_state))
            for det_id in _ordered_ids(batch.ids, model, order)]


def apply_unsafe_order(batch: EventBatch, model: HybridModel, t: float, pre_state,
                       order=None) -> dict:
    """Run member actions one after another in ``order``; the last write wins.

    Every action still sees ``pre_state``. No conflict check is made, which
    is the point: this is how a declaration-order simulator silently picks
    one outcome.
    """
    pre_state = np.asarray(pre_state, dtype=float)
    result: dict = {}
    for _, _, assignments in _unsafe_groups(batch, model, t, pre_state, order):
        for idx, value in assignments:
            result[idx] = value
    return result


class _Stop(Exception):
    pass


@dataclass(frozen=True)
class _Crossing:
    t: float
    lo: float
    det: int
    event: DetectorEvent

    def sort_key(self):
        return (self.t, self.det, _EVENT_RANK[self.event])


class _Run:
    def __init__(self, model: HybridModel, cfg: EngineConfig):
        self.model = model
        self.cfg = cfg
        self.safe_mode = cfg.safety is Safety.SAFE
        self.t = 0.0
        self.x = np.array(model.initial_state, dtype=float)
        self.mode = model.initial_mode
        self.status = SimulatorStatus()
        self.limbo: List[str] = []
        self.trace = Trace(model.names)
        self.batches: List[EventBatch] = []
        self.values = self._guards(self.t, self.x)
        self.dstates = []
        for det, v in zip(model.detectors, self.values):
            region = (classify_region(v, det.config)
                      if self._three_level(det) else Region.SAFE)
            self.dstates.append(DetectorState(armed=True, region=region))

    # -- detector bookkeeping -------------------------------------------------

    def _three_level(self, det) -> bool:
        return self.safe_mode and det.config.is_safe

    def _guards(self, t, x) -> list:
        out = []
        for det in self.model.detectors:
            v = float(det.guard(t, x))
            if not math.isfinite(v):
                self._trap(TrapError(TrapKind.NON_FINITE_STATE, t, {"detector": det.id}))
            out.append(v)
        return out

    def _events(self, i: int, pre: float, post: float) -> List[DetectorEvent]:
        det = self.model.detectors[i]
        cfg = det.config
        if not cfg.is_safe:
            fired, _ = check_naive(cfg, self.dstates[i], pre, post)
            return [DetectorEvent.ZERO_CROSSED] if fired else []
        if self._three_level(det):
            return check_safe(cfg, pre, post)
        zero = DetectorEvent.ZERO_CROSSED
        if not crossed_event(cfg, zero, pre) and crossed_event(cfg, zero, post):
            return [zero]
        return []

    def _commit(self, values: Sequence[float]) -> None:
        for i, (det, old, new) in enumerate(zip(self.model.detectors, self.values, values)):
            st = self.dstates[i]
            if not det.config.is_safe:
                _, st = check_naive(det.config, st, old, new)
            elif self._three_level(det):
                st = DetectorState(st.armed, classify_region(new, det.config))
            self.dstates[i] = st
        self.values = list(values)

    # -- status machine -------------------------------------------------------

    def _enter_limbo(self, reason: str, t: float) -> None:
        if not self.limbo:
            self.status = transition(self.status, LimboEntered(t))
        if reason not in self.limbo:
            self.limbo.append(reason)

    def _leave_limbo(self, reason: str) -> None:
        if reason in self.limbo:
            self.limbo.remove(reason)
            if not self.limbo:
                self.status = transition(self.status, RecoveredSafe())

    def _zero_handled(self) -> None:
        if self.status.tag is Status.SAFE:
            self.status = transition(self.status, ZeroHandled())

    def _trap(self, err: TrapError):
        if self.status.tag is Status.SAFE:
            self.status = transition(self.status, LimboEntered(err.time))
        self.status = transition(self.status, UnsafeEntered(err))
        logger.debug("trapped %s", err)
        raise _Stop

    # -- state mutation -------------------------------------------------------

    def _apply(self, kind: str, source: str, assignments) -> None:
        writes = []
        for idx, value in assignments:
            if idx == MODE:
                if value not in self.model.modes:
                    raise ValueError(f"{source} switched to unknown mode {value!r}")
                writes.append((MODE, self.mode, value))
                self.mode = value
                continue
            value = float(value)
            if not math.isfinite(value):
                self._trap(TrapError(TrapKind.NON_FINITE_STATE, self.t,
                                     {"variable": self.model.names[idx], "source": source}))
            writes.append((self.model.names[idx], float(self.x[idx]), value))
            self.x[idx] = value
        self.trace.log(self.t, kind, source, writes)

    def _sample(self) -> None:
        self.trace.record(self.t, self.x, self.status.tag, self.mode)

    # -- main loop ------------------------------------------------------------

    def run(self) -> SimOutcome:
        try:
            self._sample()
            t_end = self.cfg.t_end
            while self.t < t_end:
                self._advance(min(self.cfg.step.dt, t_end - self.t))
            if self.limbo:
                self._trap(TrapError(TrapKind.UNHANDLED_LIMBO, self.t,
                                     {"detectors": list(self.limbo)}))
        except _Stop:
            pass
        return SimOutcome(self.trace, self.status, self.batches)

    def _advance(self, h: float) -> None:
        model, cfg = self.model, self.cfg
        f = model.modes[self.mode]
        t0, x0 = self.t, self.x
        t1 = t0 + h
        try:
            x1 = step(f, t0, x0, h)
        except NonFiniteResult:
            self._trap(TrapError(TrapKind.NON_FINITE_STATE, t1, {"mode": self.mode}))
        g1 = self._guards(t1, x1)

        crossings = []
        seg = None
        for i, det in enumerate(model.detectors):
            for ev in self._events(i, self.values[i], g1[i]):
                if seg is None:
                    seg = make_segment(f, t0, x0, t1, x1, self.mode)
                lo, hi = bracket(
                    lambda t, det=det, ev=ev: crossed_event(
                        det.config, ev, float(det.guard(t, interpolate(seg, t)))),
                    t0, t1, cfg.step)
                crossings.append(_Crossing(hi, lo, i, ev))

        if not crossings:
            self.t, self.x = t1, x1
            self._commit(g1)
            self._sample()
            return

        crossings.sort(key=_Crossing.sort_key)
        first = crossings[0].t
        cluster = [c for c in crossings if c.t - first <= cfg.simultaneity_tol]
        t_cut = max(c.t for c in cluster)
        x_cut = interpolate(seg, t_cut)
        g_cut = self._guards(t_cut, x_cut)
        localized = {(c.det, c.event): c for c in crossings}

        events = {}
        for i in range(len(model.detectors)):
            evs = self._events(i, self.values[i], g_cut[i])
            if evs:
                events[i] = evs

        if self.safe_mode:
            for i, evs in events.items():
                if DetectorEvent.UNSAFE_ENTERED in evs:
                    c = localized.get((i, DetectorEvent.UNSAFE_ENTERED))
                    t_trap, lo = (c.t, c.lo) if c else (t_cut, t_cut)
                    self._trap_unsafe(i, t_trap, lo, seg)

        self.t, self.x = t_cut, x_cut
        if not events:
            self._commit(g_cut)
            self._sample()
            return
        self._sample()
        self._commit(g_cut)
        self._instant(events, localized)

    def _trap_unsafe(self, i: int, t_trap: float, lo: float, seg) -> None:
        det = self.model.detectors[i]
        if lo > self.trace.samples[-1].time:
            self.t, self.x = lo, interpolate(seg, lo)
            self._sample()
        self.trace.log(t_trap, "unsafe-entered", det.id)
        self._trap(TrapError(TrapKind.UNSAFE_LEVEL_CROSSED, t_trap, {"detector": det.id}))

    def _instant(self, events: Dict[int, list], localized: dict) -> None:
        """Process every event at the current instant, including cascades."""
        rounds = 0
        while events:
            rounds += 1
            if rounds > self.cfg.cascade_limit:
                self._trap(TrapError(TrapKind.NON_FINITE_STATE, self.t, {
                    "reason": "event cascade limit",
                    "limit": self.cfg.cascade_limit}))
            self._process_round(events, localized)
            localized = {}
            before = self.values
            after = self._guards(self.t, self.x)
            events = {}
            for i in range(len(self.model.detectors)):
                evs = self._events(i, before[i], after[i])
                if evs:
                    events[i] = evs
            if self.safe_mode:
                for i, evs in events.items():
                    if DetectorEvent.UNSAFE_ENTERED in evs:
                        det = self.model.detectors[i]
                        self.trace.log(self.t, "unsafe-entered", det.id)
                        self._trap(TrapError(TrapKind.UNSAFE_LEVEL_CROSSED, self.t,
                                             {"detector": det.id}))
            self._commit(after)
        self._sample()

    def _process_round(self, events: Dict[int, list], localized: dict) -> None:
        model = self.model
        zero_members = []
        for i in sorted(events):
            if DetectorEvent.ZERO_CROSSED in events[i]:
                c = localized.get((i, DetectorEvent.ZERO_CROSSED))
                zero_members.append((model.detectors[i].id, c.t if c else self.t))

        if zero_members:
            self._zero_batch(_model_batch(model, zero_members))

        for i in sorted(events):
            det = model.detectors[i]
            for ev in events[i]:
                if ev is DetectorEvent.LIMBO_ENTERED:
                    self.trace.log(self.t, "limbo-entered", det.id)
                    self._enter_limbo(det.id, self.t)
                    handler = model.limbo_handlers.get(det.id)
                    if handler is not None:
                        pre = self.x.copy()
                        self._apply("limbo-handler", det.id, handler.assignments(self.t, pre))
                        self._leave_limbo(det.id)
                elif ev is DetectorEvent.LIMBO_EXITED:
                    self.trace.log(self.t, "limbo-exited", det.id)
                    self._leave_limbo(det.id)

    def _zero_batch(self, batch: EventBatch) -> None:
        self.batches.append(batch)
        pre = self.x.copy()
        if not self.safe_mode:
            for kind, source, assignments in _unsafe_groups(
                    batch, self.model, self.t, pre, self.cfg.event_order):
                self._apply(kind, source, assignments)
            return
        simultaneous = len(batch.members) > 1 and batch.verdict is not Verdict.INDEPENDENT
        if simultaneous:
            self._enter_limbo("simultaneity", self.t)
        try:
            groups = _resolve_groups(batch, self.model, self.t, pre)
        except TrapError as err:
            self.trace.log(self.t, "conflict", "+".join(batch.ids))
            self._trap(err)
        for kind, source, assignments in groups:
            self._apply(kind, source, assignments)
        if simultaneous:
            self._leave_limbo("simultaneity")
        else:
            for _ in batch.members:
                self._zero_handled()


def simulate(model: HybridModel, cfg: Optional[EngineConfig] = None) -> SimOutcome:
    """Run ``model`` from t=0 to ``cfg.t_end`` or until a trap."""
    return _Run(model, cfg or EngineConfig()).run()
