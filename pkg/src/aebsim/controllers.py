"""Rule-based AEB and ACC, their arbitration, and the three control-level
safeguards (persistence gate, braking rate limiter, instability fallback).

The free functions are pure; ``ControlStack`` owns the per-run state (AEB
latch, ACC comfort filter, previous command, instability history) and wires
the stages together in a fixed order.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Deque, Iterable, Optional, Sequence

from .dynamics import EgoState
from .errors import ConfigurationError
from .tracker import Track

TTC_EPS = 0.01

ACC = "ACC"
AEB = "AEB"
FALLBACK = "FALLBACK"
IDLE = "IDLE"


@dataclass(frozen=True, slots=True)
class ControlCommand:
    a_cmd: float
    source: str = IDLE
    eb_active: bool = False


@dataclass(frozen=True)
class AebConfig:
    ttc_threshold: float = 1.2
    a_hard: float = -9.0
    a_eb_floor: float = -4.0
    d_margin: float = 2.0
    release_factor: float = 1.5
    min_speed: float = 0.5  # AEB stays dormant at or below this ego speed

    def __post_init__(self):
        if not self.ttc_threshold > 0:
            raise ConfigurationError("ttc_threshold must be positive")
        if not (self.a_hard <= self.a_eb_floor < 0):
            raise ConfigurationError("AEB limits must satisfy a_hard <= a_eb_floor < 0")
        if self.release_factor < 1.0:
            raise ConfigurationError("AEB release_factor must be >= 1")
        if self.min_speed < 0:
            raise ConfigurationError("AEB min_speed must be >= 0")


@dataclass(frozen=True)
class AccConfig:
    time_gap: float = 1.8
    d0: float = 2.0
    k_gap: float = 0.23
    k_rel: float = 0.74
    k_speed: float = 1.0
    v_set: float = 30.0
    a_lo: float = -3.5
    a_hi: float = 2.0
    comfort_jerk: float = 2.5
    mature_lead_frames: int = 5  # losing a lead tracked this long keeps the comfort slew...
    loss_hold_frames: int = 1  # ...for this many frames, covering benign dropouts
    engage_frames: int = 10  # output is always slewed for this long after engagement

    def __post_init__(self):
        if not self.time_gap > 0:
            raise ConfigurationError("time_gap must be positive")
        if min(self.k_gap, self.k_rel, self.k_speed) <= 0:
            raise ConfigurationError("ACC gains must be positive")
        if not (self.a_lo < 0 < self.a_hi):
            raise ConfigurationError("ACC bounds must satisfy a_lo < 0 < a_hi")
        if not self.comfort_jerk > 0:
            raise ConfigurationError("ACC comfort_jerk must be positive")
        if self.mature_lead_frames < 1:
            raise ConfigurationError("ACC mature_lead_frames must be >= 1")
        if self.loss_hold_frames < 0:
            raise ConfigurationError("ACC loss_hold_frames must be >= 0")
        if self.engage_frames < 0:
            raise ConfigurationError("ACC engage_frames must be >= 0")


@dataclass(frozen=True)
class SafeguardConfig:
    persistence: bool = False
    rate_limit: bool = False
    fallback: bool = False
    fallback_speed_cap: bool = True
    fallback_decel_cap: bool = True
    persistence_frames: int = 3
    jerk_limit_apply: float = 15.0
    jerk_limit_release: float = 5.0
    instability_window: int = 20
    instability_threshold: float = 0.3
    fallback_decel: float = -2.0
    fallback_speed_cap_factor: float = 0.8

    def __post_init__(self):
        if self.persistence_frames < 1:
            raise ConfigurationError("persistence_frames must be >= 1")
        if not (self.jerk_limit_apply > 0 and self.jerk_limit_release > 0):
            raise ConfigurationError("jerk limits must be positive")
        if self.instability_window < 1:
            raise ConfigurationError("instability_window must be >= 1")
        if not 0.0 < self.instability_threshold < 1.0:
            raise ConfigurationError("instability_threshold must lie in (0, 1)")
        if not self.fallback_decel < 0:
            raise ConfigurationError("fallback_decel must be negative")
        if not 0.0 <= self.fallback_speed_cap_factor <= 1.0:
            raise ConfigurationError("fallback_speed_cap_factor must lie in [0, 1]")

    @property
    def any_enabled(self) -> bool:
        return self.persistence or self.rate_limit or self.fallback


SAFEGUARDS_OFF = SafeguardConfig()
SAFEGUARDS_ON = SafeguardConfig(persistence=True, rate_limit=True, fallback=True)


def _clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def ttc(gap: float, v_closing: float) -> float:
    if v_closing > TTC_EPS:
        return max(gap, 0.0) / v_closing
    return math.inf


def aeb_demand(primary: Track, cfg: AebConfig) -> float:
    """Required-deceleration law, clamped between the EB floor and the hard limit."""
    a_req = primary.v_rel_est ** 2 / (2.0 * max(primary.gap_est - cfg.d_margin, 0.1))
    return -_clamp(a_req, -cfg.a_eb_floor, -cfg.a_hard)


def aeb_step(primary: Optional[Track], ego: EgoState, cfg: AebConfig) -> Optional[ControlCommand]:
    """Memoryless trigger: brake iff perceived TTC is strictly below threshold
    (and the ego is moving faster than ``min_speed``)."""
    if primary is None or ego.v <= cfg.min_speed:
        return None
    if not ttc(primary.gap_est, primary.v_rel_est) < cfg.ttc_threshold:
        return None
    return ControlCommand(aeb_demand(primary, cfg), AEB, True)


def acc_step(primary: Optional[Track], ego: EgoState, cfg: AccConfig, v_set: Optional[float] = None) -> ControlCommand:
    """Constant-time-gap follow law, never faster than set-speed pursuit."""
    vs = cfg.v_set if v_set is None else v_set
    cruise = _clamp(cfg.k_speed * (vs - ego.v), cfg.a_lo, cfg.a_hi)
    if primary is None:
        return ControlCommand(cruise, ACC)
    spacing = primary.gap_est - (cfg.d0 + cfg.time_gap * ego.v)
    follow = _clamp(cfg.k_gap * spacing - cfg.k_rel * primary.v_rel_est, cfg.a_lo, cfg.a_hi)
    return ControlCommand(min(follow, cruise), ACC)


def arbitrate(acc_cmd: ControlCommand, aeb_cmd: Optional[ControlCommand]) -> ControlCommand:
    """Most negative command wins; a present AEB command always flags EB."""
    if aeb_cmd is None:
        return acc_cmd
    return ControlCommand(min(acc_cmd.a_cmd, aeb_cmd.a_cmd), AEB, True)


def guard_persistence(aeb_cmd: Optional[ControlCommand], primary: Optional[Track],
                      cfg: SafeguardConfig) -> Optional[ControlCommand]:
    if aeb_cmd is None:
        return None
    if primary is None or primary.age_frames < cfg.persistence_frames:
        return None
    return aeb_cmd


def guard_rate_limit(prev_a: float, new_a: float, dt: float, cfg: SafeguardConfig) -> float:
    """Bound the per-step change: ``jerk_limit_apply`` toward braking,
    ``jerk_limit_release`` toward release."""
    if not dt > 0:
        raise ConfigurationError("rate limiter needs dt > 0")
    if new_a < prev_a:
        return max(new_a, prev_a - cfg.jerk_limit_apply * dt)
    return min(new_a, prev_a + cfg.jerk_limit_release * dt)


def instability_metric(frame_log: Sequence[bool], window: int) -> float:
    """Fraction of the last ``window`` frames flagged bad (short history counts as good)."""
    if window < 1:
        raise ConfigurationError("instability window must be >= 1")
    recent = list(frame_log)[-window:]
    return sum(1 for bad in recent if bad) / window


def guard_fallback(cmd: ControlCommand, instability: float, ego: EgoState, cfg: SafeguardConfig) -> ControlCommand:
    """Cap the command at ``fallback_decel * instability`` while unstable.

    Only ever lowers the command, so an active AEB request is never weakened.
    """
    if not instability > cfg.instability_threshold or not cfg.fallback_decel_cap:
        return cmd
    cap = cfg.fallback_decel * instability
    if cap < cmd.a_cmd:
        return ControlCommand(cap, AEB if cmd.eb_active else FALLBACK, cmd.eb_active)
    return cmd


@dataclass
class StackOutput:
    command: ControlCommand
    raw: ControlCommand
    instability: float
    aeb_requested: bool


class ControlStack:
    """Per-run controller state and the fixed stage order:

    instability -> ACC (comfort filtered, set speed possibly capped) ->
    AEB (latched) -> persistence gate -> arbitration -> fallback ->
    rate limiter -> actuator clamp.
    """

    def __init__(self, aeb: AebConfig, acc: AccConfig, guards: SafeguardConfig, dt: float = 0.1,
                 a_min: float = -9.0, a_max: float = 2.5, drop_after_missed: int = 1):
        self.aeb = aeb
        self.acc = acc
        self.guards = guards
        self.dt = dt
        self.a_min = a_min
        self.a_max = a_max
        self.prev_a = 0.0
        self.latched = False
        self._follow_state: Optional[float] = None
        self._acc_prev = 0.0
        self._bad: Deque[bool] = deque(maxlen=guards.instability_window)
        self._last_primary_id: Optional[int] = None
        self._frames_since_primary = math.inf
        self._lead_mature = False
        self._mature_ids: set = set()
        self._lost_frames = 0
        self._frames = 0

    def _classify(self, primary: Optional[Track]) -> bool:
        """A frame is bad when the lead is coasting, lost, or swapped for a new id."""
        if primary is None:
            bad = self._frames_since_primary < self.guards.instability_window
            self._frames_since_primary += 1
            return bad
        bad = primary.missed_frames > 0
        if self._last_primary_id is not None and primary.track_id != self._last_primary_id:
            bad = True
        if self._frames_since_primary > 0 and self._frames_since_primary < self.guards.instability_window:
            bad = True  # reacquired after a loss
        self._last_primary_id = primary.track_id
        self._frames_since_primary = 0
        return bad

    def _acc(self, primary: Optional[Track], ego: EgoState, fallback_on: bool) -> ControlCommand:
        v_set = self.acc.v_set
        if fallback_on and self.guards.fallback_speed_cap:
            v_set *= self.guards.fallback_speed_cap_factor
        raw = acc_step(primary, ego, self.acc, v_set)
        self._frames += 1
        engaging = self._frames <= self.acc.engage_frames
        self._lost_frames = self._lost_frames + 1 if primary is None else 0
        holding = self._lead_mature and self._lost_frames <= self.acc.loss_hold_frames
        if primary is None and not holding and not engaging:
            # set-speed pursuit is already smooth in v; no filter state to carry
            self._acc_prev = raw.a_cmd
            return raw
        if primary is not None:
            if primary.age_frames >= self.acc.mature_lead_frames:
                self._mature_ids.add(primary.track_id)
            self._lead_mature = primary.track_id in self._mature_ids
        base = self._follow_state if self._follow_state is not None else self._acc_prev
        step = self.acc.comfort_jerk * self.dt
        a = _clamp(raw.a_cmd, base - step, base + step)
        self._follow_state = a
        self._acc_prev = a
        return ControlCommand(a, ACC)

    def _aeb(self, primary: Optional[Track], ego: EgoState) -> Optional[ControlCommand]:
        if primary is None:
            self.latched = False
            return None
        tt = ttc(primary.gap_est, primary.v_rel_est)
        if tt < self.aeb.ttc_threshold and ego.v > self.aeb.min_speed:
            self.latched = True
        elif self.latched and not tt < self.aeb.release_factor * self.aeb.ttc_threshold:
            self.latched = False
        if not self.latched:
            return None
        return ControlCommand(aeb_demand(primary, self.aeb), AEB, True)

    def step(self, primary: Optional[Track], ego: EgoState) -> StackOutput:
        g = self.guards
        self._bad.append(self._classify(primary))
        instability = instability_metric(self._bad, g.instability_window)
        fallback_on = g.fallback and instability > g.instability_threshold

        acc_cmd = self._acc(primary, ego, fallback_on)
        aeb_cmd = self._aeb(primary, ego)
        raw = arbitrate(acc_cmd, aeb_cmd)
        if g.persistence:
            aeb_cmd = guard_persistence(aeb_cmd, primary, g)
        cmd = arbitrate(acc_cmd, aeb_cmd)
        if g.fallback:
            cmd = guard_fallback(cmd, instability, ego, g)
            if fallback_on and cmd.source == ACC and self.guards.fallback_speed_cap and primary is None:
                cmd = replace(cmd, source=FALLBACK)
        if g.rate_limit:
            cmd = replace(cmd, a_cmd=guard_rate_limit(self.prev_a, cmd.a_cmd, self.dt, g))
        cmd = replace(cmd, a_cmd=_clamp(cmd.a_cmd, self.a_min, self.a_max))
        self.prev_a = cmd.a_cmd
        return StackOutput(cmd, raw, instability, aeb_cmd is not None)
