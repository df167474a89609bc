"""Model builders: the bouncing ball and three balls colliding on a line."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import MODE, Detector, EventAction, HybridModel
from .detect import (
    DEFAULT_ARM_THRESHOLD,
    DEFAULT_LIMBO_OFFSET,
    DEFAULT_UNSAFE_OFFSET,
    DetectorConfig,
    Direction,
    NaiveKind,
    SafeKind,
)
from .engine import Safety

BOUNCING_BALL_VARIANTS = {
    "unsafe-naive": Safety.UNSAFE,
    "safe": Safety.SAFE,
    "safe-no-limbo-handler": Safety.SAFE,
}
THREE_BALLS_VARIANTS = {
    "unsafe": Safety.UNSAFE,
    "safe": Safety.SAFE,
    "safe-combined": Safety.SAFE,
}


class NonPositiveMass(ValueError):
    pass


def elastic_velocities(m1: float, v1: float, m2: float, v2: float):
    """Post-impact velocities of a 1-D perfectly elastic collision."""
    if not (m1 > 0 and m2 > 0):
        raise NonPositiveMass(f"masses must be positive, got {m1!r}, {m2!r}")
    total = m1 + m2
    return ((2 * m2 * v2 + m1 * v1 - m2 * v1) / total,
            (2 * m1 * v1 + m2 * v2 - m1 * v2) / total)


@dataclass(frozen=True)
class BouncingBallParams:
    h0: float = 3.0
    c: float = 0.7
    g: float = 9.81

    def __post_init__(self):
        if not 0 < self.c < 1:
            raise ValueError("c must lie in (0, 1)")
        if not (self.g > 0 and self.h0 > 0):
            raise ValueError("g and h0 must be positive")


@dataclass(frozen=True)
class BallParams:
    x0: float
    v0: float
    m: float
    r: float

    def __post_init__(self):
        if not self.m > 0:
            raise NonPositiveMass("ball mass must be positive")
        if not self.r > 0:
            raise ValueError("ball radius must be positive")


DEFAULT_BALLS = (
    BallParams(x0=-5.0, v0=1.0, m=1.0, r=0.5),
    BallParams(x0=0.0, v0=0.0, m=2.0, r=1.0),
    BallParams(x0=5.0, v0=-1.0, m=1.0, r=0.5),
)


def bouncing_ball(p: BouncingBallParams = BouncingBallParams(), variant: str = "safe", *,
                  limbo_offset: float = DEFAULT_LIMBO_OFFSET,
                  unsafe_offset: float = DEFAULT_UNSAFE_OFFSET,
                  arm_threshold: float = DEFAULT_ARM_THRESHOLD) -> HybridModel:
    """Ball dropped from ``h0``; each impact sets ``v := -c * pre(v)``.

    ``safe`` puts the ball to rest (mode ``rest``, v = 0) when the ground
    detector enters its limbo region. ``safe-no-limbo-handler`` leaves that
    out, so a tunneling ball reaches the unsafe level and is trapped.
    ``unsafe-naive`` uses a single-level detector with re-arm hysteresis.
    """
    if variant not in BOUNCING_BALL_VARIANTS:
        raise ValueError(f"unknown bouncing-ball variant {variant!r}")
    g, c = p.g, p.c
    H, V = 0, 1

    modes = {
        "falling": lambda t, x: np.array([x[V], -g]),
        "rest": lambda t, x: np.zeros(2),
    }
    if variant == "unsafe-naive":
        kind = NaiveKind(arm_threshold)
    else:
        kind = SafeKind(limbo_offset, unsafe_offset)
    bounce = EventAction(reads={V}, writes={V},
                         apply=lambda t, pre: [(V, -c * pre[V])], name="bounce")
    ground = Detector(DetectorConfig("ground", 0.0, Direction.FALLING, kind),
                      guard=lambda t, x: x[H], action=bounce)
    limbo = {}
    if variant == "safe":
        limbo["ground"] = EventAction(reads=set(), writes={V, MODE},
                                      apply=lambda t, pre: [(V, 0.0), (MODE, "rest")],
                                      name="come-to-rest")
    return HybridModel(
        names=("h", "v"),
        modes=modes,
        initial_state=(p.h0, 0.0),
        initial_mode="falling",
        detectors=(ground,),
        limbo_handlers=limbo,
        name=f"bouncing-ball/{variant}",
    )


def _collision(left: int, right: int, b_left: BallParams, b_right: BallParams) -> EventAction:
    vl, vr = 2 * left + 1, 2 * right + 1

    def apply(t, pre):
        a, b = elastic_velocities(b_left.m, pre[vl], b_right.m, pre[vr])
        return [(vl, a), (vr, b)]

    return EventAction(reads={vl, vr}, writes={vl, vr}, apply=apply,
                       name=f"collide-b{left + 1}-b{right + 1}")


def three_balls(p1: BallParams = DEFAULT_BALLS[0], p2: BallParams = DEFAULT_BALLS[1],
                p3: BallParams = DEFAULT_BALLS[2], variant: str = "safe",
                order: Optional[Sequence] = None, *,
                limbo_offset: float = DEFAULT_LIMBO_OFFSET,
                unsafe_offset: float = DEFAULT_UNSAFE_OFFSET) -> HybridModel:
    """Three balls on a frictionless line, ball 2 between balls 1 and 3.

    Guards are gaps minus radius sums, so they fall through zero on contact.
    ``order`` permutes the detector declaration order (ids ``b1-b2`` and
    ``b2-b3``, or indices 0 and 1), which is what a declaration-order
    simulator uses to sequence simultaneous actions. ``safe-combined`` adds
    the handler for a simultaneous double impact in the symmetric
    configuration: outer balls reverse, the middle ball keeps its velocity.
    """
    if variant not in THREE_BALLS_VARIANTS:
        raise ValueError(f"unknown three-balls variant {variant!r}")
    balls = (p1, p2, p3)
    if not (p1.x0 < p2.x0 < p3.x0):
        raise ValueError("balls must be ordered b1 < b2 < b3")
    if p2.x0 - p1.x0 <= p1.r + p2.r or p3.x0 - p2.x0 <= p2.r + p3.r:
        raise ValueError("initial gaps must be positive")

    def dynamics(t, x):
        dx = np.zeros(6)
        dx[0::2] = x[1::2]
        return dx

    kind = SafeKind(limbo_offset, unsafe_offset)
    r12, r23 = p1.r + p2.r, p2.r + p3.r
    detectors = [
        Detector(DetectorConfig("b1-b2", 0.0, Direction.FALLING, kind),
                 guard=lambda t, x: (x[2] - x[0]) - r12,
                 action=_collision(0, 1, p1, p2)),
        Detector(DetectorConfig("b2-b3", 0.0, Direction.FALLING, kind),
                 guard=lambda t, x: (x[4] - x[2]) - r23,
                 action=_collision(1, 2, p2, p3)),
    ]
    if order is not None:
        ids = [d.id for d in detectors]
        keys = [ids[o] if isinstance(o, int) else o for o in order]
        if sorted(keys) != sorted(ids):
            raise ValueError(f"order must be a permutation of {ids}, got {list(order)}")
        detectors = [detectors[ids.index(k)] for k in keys]

    combined = {}
    if variant == "safe-combined":
        combined[frozenset({"b1-b2", "b2-b3"})] = EventAction(
            reads={1, 3, 5}, writes={1, 3, 5},
            apply=lambda t, pre: [(1, -pre[1]), (3, pre[3]), (5, -pre[5])],
            name="symmetric-double-impact")

    names = tuple(f"b{k + 1}.{q}" for k in range(3) for q in ("x", "v"))
    init = tuple(v for b in balls for v in (b.x0, b.v0))
    return HybridModel(
        names=names,
        modes={"rolling": dynamics},
        initial_state=init,
        initial_mode="rolling",
        detectors=tuple(detectors),
        combined_handlers=combined,
        name=f"three-balls/{variant}",
    )


MODELS = {
    "bouncing-ball": BOUNCING_BALL_VARIANTS,
    "three-balls": THREE_BALLS_VARIANTS,
}
