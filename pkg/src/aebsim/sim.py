"""Closed-loop run: scripted traffic -> sensing -> attack -> tracker -> controllers -> ego.

One call to ``simulate`` is a sealed single-threaded task. Every random
quantity is keyed by the scenario seed, so the same seed replays the same
traffic and sensor noise under any condition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .controllers import AccConfig, AebConfig, ControlStack, SafeguardConfig, SAFEGUARDS_OFF
from .dynamics import EGO_LENGTH, ActuatorModel, EgoState, TrafficObject, WorldState, collision_check, step_ego
from .errors import ConfigurationError
from .metrics import TRACE_COLUMNS, TRACE_SCHEMA_VERSION, Trace
from .perception import (ATTACK_KINDS, AttackSpec, NoiseTape, SensorConfig, apply_attack,
                         curvature_bias_multiplier, sense)
from .scenarios import ScenarioScripts, ScenarioSpec, build_scripts
from .tracker import Tracker, TrackerConfig, primary_object

Range = Union[float, Tuple[float, float]]
ANCHORS = ("absolute", "event", "critical")


@dataclass(frozen=True)
class FollowerModel:
    """Human-like follower behind the ego (MultiVehicle only)."""
    k_gap: float = 0.2
    k_rel: float = 0.6
    d0: float = 2.0
    a_min: float = -8.0
    a_max: float = 1.5


@dataclass(frozen=True)
class SimParams:
    actuator: ActuatorModel = field(default_factory=ActuatorModel)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    aeb: AebConfig = field(default_factory=AebConfig)
    acc: AccConfig = field(default_factory=AccConfig)
    follower: FollowerModel = field(default_factory=FollowerModel)
    frame_dt: float = 0.1
    dt_phys: float = 0.01
    lane_overlap_threshold: float = 1.5

    def __post_init__(self):
        if not (self.frame_dt > 0 and self.dt_phys > 0):
            raise ConfigurationError("time steps must be positive")
        ratio = self.frame_dt / self.dt_phys
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigurationError("frame_dt must be an integer multiple of dt_phys")
        if abs(self.sensor.frame_rate * self.frame_dt - 1.0) > 1e-9:
            raise ConfigurationError("sensor frame_rate must equal 1/frame_dt")
        if abs(self.tracker.dt - self.frame_dt) > 1e-12:
            raise ConfigurationError("tracker dt must equal frame_dt")


def _range(x: Range) -> Tuple[float, float]:
    if isinstance(x, (list, tuple)):
        lo, hi = float(x[0]), float(x[1])
    else:
        lo = hi = float(x)
    if hi < lo:
        raise ConfigurationError(f"range upper bound below lower bound: {x}")
    return lo, hi


@dataclass(frozen=True)
class AttackPlan:
    """Attack template with possibly randomized timing.

    ``start_t`` is relative to ``anchor``: absolute time 0, the scenario's
    event time (hazard onset, cut-in merge, ...), or ``critical``: the moment
    the unattacked twin run (same seed and safeguards) first sees ground-truth
    TTC below the AEB threshold, else its closest approach. The twin is
    identical to the attacked run up to onset, so this models an attacker
    who strikes just before the hazard becomes critical. Ranged fields are drawn per
    seed from a stream reserved for the attack kind, so safeguard variants of
    the same attack see the same injection. Start times are snapped to the
    frame grid.
    """
    kind: str = "none"
    anchor: str = "absolute"
    start_t: Range = 0.0
    duration: Range = 0.0
    phantom_gap: Range = 12.0
    phantom_rel_speed: Optional[Range] = None
    phantom_length: float = 4.5
    factor: float = 1.0
    pattern: str = "alternate"
    drop_prob: float = 0.5

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.anchor not in ANCHORS:
            raise ConfigurationError(f"unknown attack anchor {self.anchor!r}")
        for name in ("start_t", "duration", "phantom_gap"):
            _range(getattr(self, name))
        if self.phantom_rel_speed is not None:
            _range(self.phantom_rel_speed)
        if _range(self.duration)[0] < 0:
            raise ConfigurationError("attack duration must be >= 0")
        # validates the remaining fields
        AttackSpec(self.kind, 0.0, 0.0, 1.0, None, self.phantom_length, self.factor,
                   self.pattern, self.drop_prob)

    def resolve(self, seed: int, anchor_time: float, frame_dt: float) -> AttackSpec:
        ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(2002, ATTACK_KINDS.index(self.kind)))
        u = np.random.Generator(np.random.PCG64(ss)).random(4)
        draws = []
        rel = self.phantom_rel_speed if self.phantom_rel_speed is not None else 0.0
        for x, ui in zip((self.start_t, self.duration, self.phantom_gap, rel), u):
            lo, hi = _range(x)
            draws.append(lo + (hi - lo) * float(ui))
        start, dur, pgap, prel = draws
        if self.anchor != "absolute":
            start += anchor_time
        start = max(0.0, round(start / frame_dt) * frame_dt)
        start = round(start, 9)
        return AttackSpec(self.kind, start, dur, pgap, prel if self.phantom_rel_speed is not None else None,
                          self.phantom_length,
                          self.factor, self.pattern, self.drop_prob)


NO_ATTACK_PLAN = AttackPlan()


@dataclass(frozen=True)
class Condition:
    label: str
    attack: AttackPlan = NO_ATTACK_PLAN
    safeguards: SafeguardConfig = SAFEGUARDS_OFF


class AttackTape:
    """Per-frame uniforms for random-pattern flicker, keyed by seed."""

    def __init__(self, seed: int, n_frames: int):
        ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(2003,))
        self._u = np.random.Generator(np.random.PCG64(ss)).random(n_frames).tolist()

    def attack_uniform(self, frame: int) -> float:
        return self._u[frame]


def _truth(ego: EgoState, objects: Sequence[TrafficObject], lane_thr: float) -> Tuple[float, float, float]:
    """(nearest in-lane gap, its closing speed, min TTC over in-lane forward objects)."""
    best_g, best_v, min_ttc = math.inf, 0.0, math.inf
    for o in objects:
        if abs(o.lane_offset) >= lane_thr:
            continue
        g = o.s_rear - ego.s_front
        if g <= 0.0 and o.s_rear < ego.s_front - EGO_LENGTH:
            continue
        vc = ego.v - o.v
        if g < best_g:
            best_g, best_v = g, vc
        if vc > 0.01:
            min_ttc = min(min_ttc, max(g, 0.0) / vc)
    return best_g, best_v, min_ttc


def critical_time(trace: Trace, fallback: float) -> float:
    """First frame with ground-truth TTC under the AEB threshold, else the
    closest approach, else ``fallback`` when nothing ever closes."""
    thr = trace.meta["ttc_threshold"]
    t, ttc = trace.columns["t"], trace.columns["truth_ttc"]
    for ti, x in zip(t, ttc):
        if x < thr:
            return ti
    k = min(range(len(ttc)), key=ttc.__getitem__)
    return t[k] if math.isfinite(ttc[k]) else fallback


def simulate(spec: ScenarioSpec, condition: Condition = Condition("baseline"),
             params: SimParams = SimParams()) -> Trace:
    scripts: ScenarioScripts = build_scripts(spec)
    dt = params.frame_dt
    n_sub = int(round(dt / params.dt_phys))
    h = dt / n_sub
    n_max = int(round(spec.duration / dt))
    act = params.actuator
    lane_thr = params.lane_overlap_threshold

    times = np.arange(n_max + 1) * dt
    obj_rows = []
    for sc in scripts.objects:
        s, v, a = sc.profile.states(times)
        obj_rows.append((sc, s.tolist(), v.tolist(), a.tolist(), sc.lane.values(times).tolist()))

    noise = NoiseTape(spec.seed, [sc.id for sc in scripts.objects], n_max)
    if condition.attack.anchor == "critical":
        anchor_t = critical_time(simulate(spec, replace(condition, attack=NO_ATTACK_PLAN), params),
                                 scripts.event_time)
    elif condition.attack.anchor == "event":
        anchor_t = scripts.event_time
    else:
        anchor_t = 0.0
    attack = condition.attack.resolve(spec.seed, anchor_t, dt)
    attack_tape = AttackTape(spec.seed, n_max) if attack.kind == "flicker" and attack.pattern == "random" else None
    kappa = curvature_bias_multiplier(spec.family, scripts.kappa)
    tracker = Tracker(params.tracker)
    stack = ControlStack(params.aeb, replace(params.acc, v_set=scripts.v_set), condition.safeguards, dt,
                         act.a_min, act.a_max, params.tracker.drop_after_missed)

    ego = EgoState(0.0, 0.0, scripts.ego_v0)
    fol = scripts.follower
    fm = params.follower
    if fol is not None:
        f_front = ego.s_rear - fol.gap0
        f_v = fol.v0
        f_delay = max(0, int(round(fol.reaction / dt)))
        f_hist: List[Tuple[float, float, float, float]] = []
    follower_collision = False

    rows: List[tuple] = []
    phantom_speed = None
    collision = None
    end_reason = "duration"

    for k in range(n_max):
        t = k * dt
        objects = [TrafficObject(sc.id, s[k], v[k], a[k], lane[k], sc.length, sc.kind)
                   for sc, s, v, a, lane in obj_rows]
        world = WorldState(t, ego, objects)
        tg, tv, tttc = _truth(ego, objects, lane_thr)

        dets = sense(world, params.sensor, noise, k, scripts.lane_noise_scale)
        active = attack.kind == "distance_bias" or (attack.kind != "none" and attack.active(t))
        if attack.kind == "false_positive" and active and phantom_speed is None:
            phantom_speed = ego.v
        dets = apply_attack(dets, world, attack, t, k, attack_tape, kappa, lane_thr, phantom_speed,
                            params.sensor.frame_rate)
        tracks = tracker.step(dets)
        primary = primary_object(tracks, lane_thr)
        out = stack.step(primary, ego)
        cmd = out.command

        if fol is not None:
            fg = ego.s_rear - f_front
            fv = f_v
        else:
            fg, fv = math.inf, 0.0
        if primary is not None:
            pg, pv, tid, tage, tmiss = primary.gap_est, primary.v_rel_est, primary.track_id, primary.age_frames, primary.missed_frames
        else:
            pg, pv, tid, tage, tmiss = math.inf, 0.0, -1, 0, 0
        rows.append((t, ego.s_front, ego.v, ego.a, cmd.a_cmd, cmd.source, int(cmd.eb_active),
                     tg, tv, tttc, pg, pv, tid, tage, tmiss, out.instability, fg, fv, int(active)))

        # physics over [t, t + dt]
        travel = (ego.v + act.a_max * dt + 0.5) * dt + 0.05
        near = False
        for sc, s, v, a, lane in obj_rows:
            if min(abs(lane[k]), abs(lane[k + 1])) < lane_thr and s[k] >= ego.s_rear - 1e-9 \
                    and s[k] - ego.s_front <= travel:
                near = True
                break
        ego_start = ego
        if near:
            for i in range(1, n_sub + 1):
                ego = step_ego(ego, cmd.a_cmd, act, h)
                ts = t + i * h
                objs = []
                for sc, *_ in obj_rows:
                    ss_, vv, aa, ll = sc.state(ts)
                    objs.append(TrafficObject(sc.id, ss_, vv, aa, ll, sc.length, sc.kind))
                hit = collision_check(WorldState(ts, ego, objs), lane_thr)
                if hit is not None:
                    collision = replace(hit, t=round(ts, 9))
                    break
        else:
            ego = step_ego(ego, cmd.a_cmd, act, dt)
        if collision is not None:
            end_reason = "collision"
            break

        if fol is not None:
            f_hist.append((ego_start.s_rear, ego_start.v, f_front, f_v))
            er, ev, ff, fvv = f_hist[max(0, len(f_hist) - 1 - f_delay)]
            desired = fm.d0 + fol.headway * fvv
            fa = fm.k_gap * ((er - ff) - desired) + fm.k_rel * (ev - fvv)
            fa = min(max(fa, fm.a_min), fm.a_max)
            nv = max(0.0, f_v + fa * dt)
            f_front += 0.5 * (f_v + nv) * dt
            f_v = nv
            if f_front >= ego.s_rear:
                follower_collision = True
                f_front = ego.s_rear
                f_v = min(f_v, ego.v)

        if ego.v == 0.0 and k > 0:
            ahead = [sc for sc, s, v, a, lane in obj_rows
                     if abs(lane[k + 1]) < lane_thr and 0.0 < s[k + 1] - ego.s_front <= params.sensor.range_max]
            if not ahead:
                end_reason = "standstill"
                break

    columns: Dict[str, list] = {c: list(col) for c, col in zip(TRACE_COLUMNS, zip(*rows))}
    meta: Dict[str, Any] = {
        "schema_version": TRACE_SCHEMA_VERSION,
        "family": spec.family,
        "seed": spec.seed,
        "condition": condition.label,
        "duration": spec.duration,
        "frame_dt": dt,
        "n_frames": len(rows),
        "end_reason": end_reason,
        "collision": collision is not None,
        "collision_t": collision.t if collision else None,
        "collision_object": collision.object_id if collision else None,
        "impact_speed": collision.impact_speed if collision else None,
        "ttc_threshold": params.aeb.ttc_threshold,
        "has_follower": fol is not None,
        "follower_collision": follower_collision,
        "attack_kind": attack.kind,
        "attack_start_t": attack.start_t,
        "attack_duration": attack.duration,
        "event_time": scripts.event_time,
    }
    return Trace(meta, columns)


def truth_trajectory(spec: ScenarioSpec, frame_dt: float = 0.1) -> List[tuple]:
    """Scripted-object ground truth on the frame grid over the full horizon.

    Depends on (family, seed, duration) only; the condition never enters.
    """
    scripts = build_scripts(spec)
    n = int(round(spec.duration / frame_dt))
    times = np.arange(n + 1) * frame_dt
    out = []
    for sc in scripts.objects:
        s, v, a = sc.profile.states(times)
        lane = sc.lane.values(times)
        for k in range(n + 1):
            out.append((float(times[k]), sc.id, sc.kind, float(s[k]), float(v[k]), float(a[k]), float(lane[k])))
    out.sort(key=lambda r: (r[0], r[1]))
    return out
