"""Fixed-step RK4 integration with Hermite dense output and crossing localization."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

Dynamics = Callable[[float, np.ndarray], np.ndarray]


class Direction(enum.Enum):
    FALLING = "falling"
    RISING = "rising"


class NonFiniteResult(ArithmeticError):
    pass


class OutOfSegment(ValueError):
    pass


class NoConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class StepConfig:
    dt: float = 1e-3
    t_tol: float = 1e-9
    max_bisections: int = 64

    def __post_init__(self):
        if not (self.dt > 0 and self.t_tol > 0):
            raise ValueError("dt and t_tol must be positive")
        if not self.t_tol < self.dt:
            raise ValueError("t_tol must be smaller than dt")
        need = math.ceil(math.log2(self.dt / self.t_tol))
        if self.max_bisections < need:
            raise ValueError(f"max_bisections={self.max_bisections} < {need} needed for dt/t_tol")


@dataclass(frozen=True)
class StepSegment:
    t0: float
    t1: float
    x0: np.ndarray
    x1: np.ndarray
    dx0: np.ndarray
    dx1: np.ndarray
    mode: str = ""


def make_segment(f: Dynamics, t0: float, x0, t1: float, x1, mode: str = "") -> StepSegment:
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    return StepSegment(t0, t1, x0, x1,
                       np.asarray(f(t0, x0), dtype=float),
                       np.asarray(f(t1, x1), dtype=float), mode)


def step(f: Dynamics, t: float, x, dt: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    half = 0.5 * dt
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = np.asarray(f(t, x), dtype=float)
        k2 = np.asarray(f(t + half, x + half * k1), dtype=float)
        k3 = np.asarray(f(t + half, x + half * k2), dtype=float)
        k4 = np.asarray(f(t + dt, x + dt * k3), dtype=float)
        out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteResult(f"non-finite state after step from t={t!r}")
    return out


def interpolate(seg: StepSegment, t: float) -> np.ndarray:
    """Cubic Hermite interpolant on the segment; exact at both endpoints."""
    if not seg.t0 <= t <= seg.t1:
        raise OutOfSegment(f"t={t!r} outside [{seg.t0!r}, {seg.t1!r}]")
    if t == seg.t0:
        return seg.x0.copy()
    if t == seg.t1:
        return seg.x1.copy()
    h = seg.t1 - seg.t0
    s = (t - seg.t0) / h
    s2 = s * s
    s3 = s2 * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    return h00 * seg.x0 + h10 * h * seg.dx0 + h01 * seg.x1 + h11 * h * seg.dx1


def bracket(crossed: Callable[[float], bool], t0: float, t1: float,
            cfg: StepConfig) -> Tuple[float, float]:
    """Bisect ``[t0, t1]`` where ``crossed`` is False at t0 and True at t1.

    Returns ``(lo, hi)`` with ``hi - lo <= cfg.t_tol``, ``crossed(lo)`` False
    and ``crossed(hi)`` True.
    """
    lo, hi = t0, t1
    n = 0
    while hi - lo > cfg.t_tol:
        if n >= cfg.max_bisections:
            raise NoConvergence(f"bracket [{lo!r}, {hi!r}] after {n} bisections")
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break  # float resolution reached
        if crossed(mid):
            hi = mid
        else:
            lo = mid
        n += 1
    return lo, hi


def past_level(value: float, level: float, direction: Direction) -> bool:
    """True when ``value`` is on the post-crossing side of ``level``."""
    if direction is Direction.FALLING:
        return value <= level
    return value >= level


def localize(guard: Callable[[float, np.ndarray], float], seg: StepSegment,
             cfg: StepConfig, direction: Direction = Direction.FALLING,
             level: float = 0.0) -> Optional[float]:
    """Time of the first directional crossing of ``level`` within the segment.

    Only endpoint sign changes are seen; a guard that crosses and returns
    inside one step is missed. The returned time is the post-crossing end of
    the final bracket.
    """
    g0 = guard(seg.t0, seg.x0)
    g1 = guard(seg.t1, seg.x1)
    if past_level(g0, level, direction) or not past_level(g1, level, direction):
        return None

    def crossed(t):
        return past_level(guard(t, interpolate(seg, t)), level, direction)

    return bracket(crossed, seg.t0, seg.t1, cfg)[1]
