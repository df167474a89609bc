import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridsafe.core import MODE, Detector, EventAction, HybridModel, Status, TrapError, TrapKind
from hybridsafe.detect import DetectorConfig, Direction, SafeKind
from hybridsafe.engine import (
    EngineConfig,
    EventBatch,
    Safety,
    Verdict,
    apply_unsafe_order,
    batch_events,
    resolve_batch,
    simulate,
)
from hybridsafe.integrate import StepConfig
from hybridsafe.models import BallParams, DEFAULT_BALLS, bouncing_ball, three_balls

V1, V2, V3 = 1, 3, 5


def _three_ball_actions(model):
    return {d.id: d.action for d in model.detectors}


# -- batch_events ------------------------------------------------------------------


def test_batch_within_tolerance():
    batches = batch_events([("d1", 3.5), ("d2", 3.5 + 1e-10)], 2e-9)
    assert len(batches) == 1 and batches[0].ids == ("d1", "d2")
    assert batches[0].t_batch == 3.5


def test_batch_far_apart():
    batches = batch_events([("d1", 1.0), ("d2", 2.0)], 2e-9)
    assert [b.ids for b in batches] == [("d1",), ("d2",)]


def test_batch_greedy_anchors_on_batch_minimum():
    batches = batch_events([("a", 0.0), ("b", 1.5e-9), ("c", 3e-9)], 2e-9)
    assert [b.ids for b in batches] == [("a", "b"), ("c",)]


def test_batch_conflict_on_shared_write():
    m = three_balls(variant="safe")
    (b,) = batch_events([("b1-b2", 3.5), ("b2-b3", 3.5)], 2e-9, _three_ball_actions(m))
    assert b.verdict is Verdict.CONFLICT
    assert [m.var_name(i) for i in b.contested] == ["b2.v"]


def test_batch_combined_verdict_when_handler_registered():
    m = three_balls(variant="safe-combined")
    (b,) = batch_events([("b1-b2", 3.5), ("b2-b3", 3.5)], 2e-9,
                        _three_ball_actions(m), m.combined_handlers)
    assert b.verdict is Verdict.COMBINED_HANDLED


def test_batch_write_read_overlap_is_conflict():
    a = EventAction(reads={0}, writes={1}, apply=lambda t, x: [(1, 0.0)])
    b = EventAction(reads={1}, writes={2}, apply=lambda t, x: [(2, 0.0)])
    (batch,) = batch_events([("a", 1.0), ("b", 1.0)], 1e-9, {"a": a, "b": b})
    assert batch.verdict is Verdict.CONFLICT and batch.contested == (1,)


# -- resolve_batch -------------------------------------------------------------------


def test_resolve_singleton_bounce():
    m = bouncing_ball(variant="safe")
    batch = EventBatch(0.78, (("ground", 0.78),))
    assert resolve_batch(batch, m, 0.78, [0.0, -2.0]) == [(1, pytest.approx(1.4))]


def test_resolve_symmetric_with_combined_handler():
    m = three_balls(variant="safe-combined")
    pre = np.array([-1.5, 1.0, 0.0, 0.0, 1.5, -1.0])
    (batch,) = batch_events([("b1-b2", 3.5), ("b2-b3", 3.5)], 2e-9,
                            _three_ball_actions(m), m.combined_handlers)
    out = dict(resolve_batch(batch, m, 3.5, pre))
    assert out == {V1: -1.0, V2: 0.0, V3: 1.0}


def test_resolve_symmetric_without_handler_traps():
    m = three_balls(variant="safe")
    pre = np.array([-1.5, 1.0, 0.0, 0.0, 1.5, -1.0])
    (batch,) = batch_events([("b1-b2", 3.5), ("b2-b3", 3.5)], 2e-9, _three_ball_actions(m))
    with pytest.raises(TrapError) as info:
        resolve_batch(batch, m, 3.5, pre)
    assert info.value.kind is TrapKind.UNHANDLED_SIMULTANEITY
    assert info.value.time == 3.5
    assert info.value.detail["contested"] == ["b2.v"]


def test_resolve_rejects_handler_exceeding_write_set():
    leaky = EventAction(reads={0}, writes={0}, apply=lambda t, x: [(0, 1.0), (1, 1.0)])
    m = HybridModel(("x", "y"), {"m": lambda t, x: np.zeros(2)}, (1.0, 1.0), "m",
                    (Detector(DetectorConfig("d"), lambda t, x: x[0], leaky),))
    with pytest.raises(RuntimeError):
        resolve_batch(EventBatch(0.0, (("d", 0.0),)), m, 0.0, [1.0, 1.0])


# -- apply_unsafe_order ----------------------------------------------------------------


def _symmetric_batch():
    return EventBatch(3.5, (("b1-b2", 3.5), ("b2-b3", 3.5)), Verdict.CONFLICT, (V2,))


PRE = np.array([-1.5, 1.0, 0.0, 0.0, 1.5, -1.0])


def test_unsafe_order_declared_moves_ball2_left():
    m = three_balls(variant="unsafe")
    out = apply_unsafe_order(_symmetric_batch(), m, 3.5, PRE, ("b1-b2", "b2-b3"))
    assert out[V2] < 0


def test_unsafe_order_swapped_moves_ball2_right():
    m = three_balls(variant="unsafe")
    out = apply_unsafe_order(_symmetric_batch(), m, 3.5, PRE, ("b2-b3", "b1-b2"))
    assert out[V2] > 0


def test_unsafe_order_accepts_indices_and_model_declaration_order():
    swapped = three_balls(variant="unsafe", order=(1, 0))
    out = apply_unsafe_order(_symmetric_batch(), swapped, 3.5, PRE)
    assert out[V2] > 0


@settings(max_examples=50)
@given(st.integers(min_value=2, max_value=5), st.randoms(use_true_random=False))
def test_independent_batches_are_order_invariant(n, rnd):
    actions = {}
    for k in range(n):
        value = rnd.uniform(-10, 10)
        actions[f"d{k}"] = EventAction(reads={k}, writes={k},
                                       apply=lambda t, x, k=k, value=value: [(k, x[k] + value)])
    dets = tuple(Detector(DetectorConfig(i), lambda t, x: 1.0, a) for i, a in actions.items())
    m = HybridModel(tuple(f"x{k}" for k in range(n)), {"m": lambda t, x: np.zeros(n)},
                    tuple(range(n)), "m", dets)
    (batch,) = batch_events([(i, 1.0) for i in actions], 1e-9, actions)
    assert batch.verdict is Verdict.INDEPENDENT
    pre = np.arange(n, dtype=float)
    results = {tuple(sorted(apply_unsafe_order(batch, m, 1.0, pre, p).items()))
               for p in itertools.permutations(actions)}
    assert len(results) == 1
    assert dict(resolve_batch(batch, m, 1.0, pre)) == dict(next(iter(results)))


# -- simulate ----------------------------------------------------------------------


def test_safe_ball_comes_to_rest():
    out = simulate(bouncing_ball(variant="safe"), EngineConfig(t_end=10.0))
    assert out.terminal == "ReachedTEnd"
    last = out.trace.samples[-1]
    assert last.mode == "rest" and last.state[1] == 0.0
    out.trace.validate()


def test_unsafe_naive_ball_tunnels_silently():
    out = simulate(bouncing_ball(variant="unsafe-naive"),
                   EngineConfig(t_end=10.0, safety=Safety.UNSAFE))
    assert out.terminal == "ReachedTEnd"
    h = out.trace.column("h")
    assert h[-1] < -100


def test_symmetric_three_balls_trap_at_3_5():
    cfg = EngineConfig(t_end=10.0)
    out = simulate(three_balls(variant="safe"), cfg)
    assert out.trap.kind is TrapKind.UNHANDLED_SIMULTANEITY
    assert abs(out.trap.time - 3.5) <= cfg.simultaneity_tol + cfg.step.t_tol
    assert out.trap.detail["contested"] == ["b2.v"]
    assert out.trace.samples[-1].time <= out.trap.time


def test_trapped_status_passes_through_limbo():
    out = simulate(three_balls(variant="safe"), EngineConfig(t_end=10.0))
    assert out.status.tag is Status.UNSAFE and out.terminal == "Trapped"


def test_simulate_is_deterministic():
    a = simulate(three_balls(variant="unsafe"), EngineConfig(t_end=6.0, safety=Safety.UNSAFE))
    b = simulate(three_balls(variant="unsafe"), EngineConfig(t_end=6.0, safety=Safety.UNSAFE))
    assert a.trace.samples == b.trace.samples
    assert a.trace.events == b.trace.events


def test_no_sample_in_unsafe_region_when_trapped():
    out = simulate(bouncing_ball(variant="safe-no-limbo-handler"), EngineConfig(t_end=10.0))
    assert out.trap.kind is TrapKind.UNSAFE_LEVEL_CROSSED
    assert min(out.trace.column("h")) > -(1e-4 + 1e-2)


def _dip_model(amplitude, handler=False):
    # x(t) = -amplitude * sin(t): dips below zero, then comes back up
    det = Detector(DetectorConfig("dip", 0.0, Direction.FALLING, SafeKind(1e-4, 1e-2)),
                   lambda t, x: x[0] + 1e-5, None)
    limbo = {}
    if handler:
        limbo["dip"] = EventAction(reads=set(), writes={MODE},
                                   apply=lambda t, x: [(MODE, "m")])
    return HybridModel(("x",), {"m": lambda t, x: np.array([-amplitude * math.cos(t)])},
                       (0.0,), "m", (det,), limbo_handlers=limbo)


def test_limbo_interval_closed_by_limbo_exit():
    out = simulate(_dip_model(5e-4), EngineConfig(t_end=4.0))
    assert out.terminal == "ReachedTEnd"
    tags = [s.status for s in out.trace.samples]
    assert Status.LIMBO in tags
    kinds = [e.kind for e in out.trace.events]
    assert kinds == ["zero-crossed", "limbo-entered", "limbo-exited"]
    # every limbo run of samples ends where a limbo-exited event was logged
    exits = {e.time for e in out.trace.events if e.kind == "limbo-exited"}
    for prev, cur in zip(out.trace.samples, out.trace.samples[1:]):
        if prev.status is Status.LIMBO and cur.status is Status.SAFE:
            assert cur.time in exits
    out.trace.validate()


def test_unhandled_limbo_at_t_end():
    out = simulate(_dip_model(5e-4), EngineConfig(t_end=1.0))
    assert out.trap.kind is TrapKind.UNHANDLED_LIMBO
    assert out.trap.time == 1.0
    assert out.trap.detail["detectors"] == ["dip"]


def test_limbo_handler_recovers_immediately():
    out = simulate(_dip_model(5e-4, handler=True), EngineConfig(t_end=1.0))
    assert out.terminal == "ReachedTEnd"
    assert [e.kind for e in out.trace.events] == ["zero-crossed", "limbo-entered",
                                                     "limbo-handler"]


def test_blow_up_traps_nonfinite():
    m = HybridModel(("x",), {"m": lambda t, x: x * x * x}, (1.0,), "m", ())
    out = simulate(m, EngineConfig(step=StepConfig(dt=0.05), t_end=2.0))
    assert out.trap.kind is TrapKind.NON_FINITE_STATE
    assert all(math.isfinite(v) for s in out.trace.samples for v in s.state)


def test_event_cascade_limit():
    # d1 pushes x up through d2's level, d2 pushes it back down through d1's
    up = EventAction(reads=set(), writes={0}, apply=lambda t, x: [(0, 1.0)])
    down = EventAction(reads=set(), writes={0}, apply=lambda t, x: [(0, -0.5)])
    dets = (
        Detector(DetectorConfig("d1"), lambda t, x: x[0], up),
        Detector(DetectorConfig("d2"), lambda t, x: 0.5 - x[0], down),
    )
    m = HybridModel(("x",), {"m": lambda t, x: np.array([-1.0])}, (0.1,), "m", dets)
    out = simulate(m, EngineConfig(t_end=1.0, safety=Safety.UNSAFE, cascade_limit=10))
    assert out.trap.kind is TrapKind.NON_FINITE_STATE
    assert out.trap.detail["reason"] == "event cascade limit"
    assert abs(out.trap.time - 0.1) < 1e-8


def test_engine_config_invariants():
    with pytest.raises(ValueError):
        EngineConfig(simultaneity_tol=1e-9)
    with pytest.raises(ValueError):
        EngineConfig(t_end=0.0)
    assert EngineConfig().simultaneity_tol == 2e-9


def test_independent_simultaneous_crossings_stay_safe():
    # two identical balls on independent floors hit at the same instant
    def make():
        c = 0.5
        dets = tuple(
            Detector(DetectorConfig(f"g{k}"), lambda t, x, k=k: x[2 * k],
                     EventAction(reads={2 * k + 1}, writes={2 * k + 1},
                                 apply=lambda t, x, k=k: [(2 * k + 1, -c * x[2 * k + 1])]))
            for k in range(2))
        return HybridModel(("h0", "v0", "h1", "v1"),
                           {"f": lambda t, x: np.array([x[1], -9.81, x[3], -9.81])},
                           (1.0, 0.0, 1.0, 0.0), "f", dets)
    out = simulate(make(), EngineConfig(t_end=1.0))
    assert out.terminal == "ReachedTEnd"
    batch = out.batches[0]
    assert all(len(b.members) == 2 for b in out.batches)
    assert batch.verdict is Verdict.INDEPENDENT and len(batch.members) == 2


def test_asymmetric_start_collision_times():
    b1 = BallParams(-4.8, 1.0, 1.0, 0.5)
    out = simulate(three_balls(b1, *DEFAULT_BALLS[1:], variant="safe"), EngineConfig(t_end=10.0))
    times = [e.time for e in out.trace.events]
    assert times[0] == pytest.approx(3.3, abs=1e-8)
    assert times[1] == pytest.approx(3.42, abs=1e-8)
    assert times[2] == pytest.approx(4.5, abs=1e-7)
