"""Longitudinal world model: ego vehicle with first-order actuator lag and
scripted traffic objects.

Positions are measured along the ego lane. The ego is described by its front
bumper, traffic objects by their rear bumper, so ``gap`` is a plain
difference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

from .errors import ConfigurationError

EGO_LENGTH = 4.5


@dataclass(frozen=True, slots=True)
class ActuatorModel:
    tau: float = 0.2
    a_min: float = -9.0
    a_max: float = 2.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigurationError(f"actuator tau must be positive, got {self.tau}")
        if not (self.a_min < 0 < self.a_max):
            raise ConfigurationError("actuator limits must satisfy a_min < 0 < a_max")

    def clamp(self, a: float) -> float:
        return min(max(a, self.a_min), self.a_max)


@dataclass(frozen=True, slots=True)
class EgoState:
    t: float
    s_front: float
    v: float
    a: float = 0.0
    a_cmd_applied: float = 0.0

    @property
    def s_rear(self) -> float:
        return self.s_front - EGO_LENGTH


@dataclass(frozen=True, slots=True)
class TrafficObject:
    id: int
    s_rear: float
    v: float
    a: float = 0.0
    lane_offset: float = 0.0
    length: float = 4.5
    kind: str = "vehicle"

    def __post_init__(self):
        if not self.length > 0:
            raise ConfigurationError(f"object {self.id}: length must be positive")


@dataclass(slots=True)
class WorldState:
    t: float
    ego: EgoState
    objects: List[TrafficObject] = field(default_factory=list)

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ConfigurationError(f"duplicate object ids in world: {ids}")


@dataclass(frozen=True, slots=True)
class Collision:
    t: float
    object_id: int
    impact_speed: float


def _lagged_motion(v0: float, a0: float, c: float, tau: float, h: float):
    """Closed-form (a, v, ds) after time ``h`` for a' = (c - a)/tau."""
    e = math.exp(-h / tau)
    da = a0 - c
    a = c + da * e
    v = v0 + c * h + da * tau * (1.0 - e)
    ds = v0 * h + 0.5 * c * h * h + da * tau * (h - tau * (1.0 - e))
    return a, v, ds


def _stop_time(v0: float, a0: float, c: float, tau: float, h: float) -> float:
    # v(t) is smooth with a single sign change on (0, h] when we get here.
    lo, hi = 0.0, h
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _lagged_motion(v0, a0, c, tau, mid)[1] > 0.0:
            lo = mid
        else:
            hi = mid
    return lo


def step_ego(state: EgoState, a_cmd: float, act: ActuatorModel, dt: float) -> EgoState:
    """Advance the ego by ``dt`` holding ``a_cmd`` constant.

    Uses the exact solution of the lagged double integrator, so one call
    with ``dt`` and ten calls with ``dt/10`` agree to rounding. Speed is
    clamped at zero (no reverse); when the clamp engages the position is
    taken at the stopping instant and ``a`` keeps the lagged value that
    drove the clamp.
    """
    if not (math.isfinite(a_cmd) and math.isfinite(dt) and dt > 0):
        raise ConfigurationError(f"step_ego needs finite a_cmd and dt > 0 (a_cmd={a_cmd}, dt={dt})")
    if not (math.isfinite(state.v) and math.isfinite(state.a) and math.isfinite(state.s_front)):
        raise ConfigurationError(f"non-finite ego state: {state}")
    c = act.clamp(a_cmd)
    a1, v1, ds = _lagged_motion(state.v, state.a, c, act.tau, dt)
    if v1 < 0.0:
        if state.v <= 0.0:
            ds = 0.0
        else:
            ts = _stop_time(state.v, state.a, c, act.tau, dt)
            ds = _lagged_motion(state.v, state.a, c, act.tau, ts)[2]
        v1 = 0.0
    if ds < 0.0:
        ds = 0.0
    a1 = min(max(a1, act.a_min), act.a_max)
    return EgoState(state.t + dt, state.s_front + ds, v1, a1, c)


def step_object(obj: TrafficObject, scenario_script, t: float, dt: float) -> TrafficObject:
    """Move a scripted object to ``t + dt``; the script is a pure function of time."""
    s, v, a, lane = scenario_script.state(t + dt)
    return replace(obj, s_rear=s, v=v, a=a, lane_offset=lane)


def gap(ego: EgoState, obj: TrafficObject) -> float:
    return obj.s_rear - ego.s_front


def collision_check(world: WorldState, lane_overlap_threshold: float = 1.5) -> Optional[Collision]:
    """First forward object (lowest id wins ties) overlapping the ego."""
    ego = world.ego
    for obj in world.objects:
        if obj.s_rear < ego.s_rear:
            continue  # behind the ego's rear bumper: not a forward object
        if gap(ego, obj) <= 0.0 and abs(obj.lane_offset) < lane_overlap_threshold:
            return Collision(world.t, obj.id, ego.v - obj.v)
    return None
