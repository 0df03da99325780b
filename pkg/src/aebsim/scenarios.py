"""Seeded scenario families and their scripted (open-loop) traffic.

Everything here is a pure function of ``(family, seed)`` plus the shipped
calibration ranges; nothing looks at the ego's realised trajectory except the
MultiVehicle follower, which the run loop integrates itself.
"""
from __future__ import annotations

import bisect
import copy
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml

from .errors import ConfigurationError

FAMILIES = ("HighwayFollowing", "StopAndGo", "CutIn", "ParkedVehicle", "CurvedRoad", "MultiVehicle")


@lru_cache(maxsize=None)
def _shipped_calibration() -> Dict[str, Any]:
    text = resources.files("aebsim").joinpath("calibration.yaml").read_text()
    return yaml.safe_load(text)


def load_calibration(overrides: Optional[Mapping[str, Mapping[str, Any]]] = None) -> Dict[str, Any]:
    cal = copy.deepcopy(_shipped_calibration())
    for family, values in (overrides or {}).items():
        if family not in cal:
            raise ConfigurationError(f"calibration override for unknown family {family!r}")
        for key, val in values.items():
            if key not in cal[family]:
                raise ConfigurationError(f"unknown calibration key {family}.{key}")
            cal[family][key] = val
    return cal


# --------------------------------------------------------------------------
# script primitives


@dataclass(frozen=True)
class Maneuver:
    """From ``t`` on, accelerate at ``accel`` until ``v_target`` is reached."""
    t: float
    accel: float
    v_target: float


class LongitudinalProfile:
    """Piecewise-constant acceleration profile with closed-form evaluation."""

    def __init__(self, s0: float, v0: float, maneuvers: Sequence[Maneuver] = ()):
        self.s0 = s0
        self.v0 = v0
        knots_t = [0.0]
        knots_s = [s0]
        knots_v = [v0]
        knots_a = [0.0]
        man = sorted(maneuvers, key=lambda m: m.t)
        for i, m in enumerate(man):
            t_next = man[i + 1].t if i + 1 < len(man) else math.inf
            self._advance_to(knots_t, knots_s, knots_v, knots_a, m.t)
            v = knots_v[-1]
            if m.accel == 0.0 or (m.v_target - v) * m.accel <= 0.0:
                continue
            t_reach = m.t + (m.v_target - v) / m.accel
            knots_a[-1] = m.accel
            if t_reach < t_next:
                self._advance_to(knots_t, knots_s, knots_v, knots_a, t_reach)
                knots_v[-1] = m.v_target  # kill rounding drift
        self.knots_t = knots_t
        self.knots_s = knots_s
        self.knots_v = knots_v
        self.knots_a = knots_a

    @staticmethod
    def _advance_to(kt, ks, kv, ka, t):
        if t <= kt[-1]:
            if t == kt[-1]:
                ka[-1] = 0.0
            return
        h = t - kt[-1]
        a = ka[-1]
        v = kv[-1]
        v_end = v + a * h
        if v_end < 0.0:  # a braking segment never drives the object backwards
            h0 = -v / a
            ks.append(ks[-1] + v * h0 + 0.5 * a * h0 * h0)
            kt.append(kt[-1] + h0)
            kv.append(0.0)
            ka.append(0.0)
            if t > kt[-1]:
                kt.append(t)
                ks.append(ks[-1])
                kv.append(0.0)
                ka.append(0.0)
            return
        kt.append(t)
        ks.append(ks[-1] + v * h + 0.5 * a * h * h)
        kv.append(v_end)
        ka.append(0.0)

    def state(self, t: float) -> Tuple[float, float, float]:
        i = bisect.bisect_right(self.knots_t, t) - 1
        if i < 0:
            i = 0
        h = t - self.knots_t[i]
        a = self.knots_a[i]
        v = self.knots_v[i] + a * h
        if v < 0.0:
            v = 0.0
        return self.knots_s[i] + self.knots_v[i] * h + 0.5 * a * h * h, v, a

    def states(self, times: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        kt = np.asarray(self.knots_t)
        idx = np.clip(np.searchsorted(kt, times, side="right") - 1, 0, None)
        h = times - kt[idx]
        a = np.asarray(self.knots_a)[idx]
        v0 = np.asarray(self.knots_v)[idx]
        s = np.asarray(self.knots_s)[idx] + v0 * h + 0.5 * a * h * h
        return s, np.maximum(v0 + a * h, 0.0), a


@dataclass(frozen=True)
class LaneProfile:
    """Constant offset, optionally with a cosine-blended merge to ``offset1``."""
    offset0: float = 0.0
    merge_t: float = math.inf
    merge_duration: float = 1.5
    offset1: float = 0.0

    def at(self, t: float) -> float:
        if t <= self.merge_t:
            return self.offset0
        u = (t - self.merge_t) / self.merge_duration
        if u >= 1.0:
            return self.offset1
        w = 0.5 - 0.5 * math.cos(math.pi * u)
        return self.offset0 + (self.offset1 - self.offset0) * w

    def values(self, times: np.ndarray) -> np.ndarray:
        u = np.clip((times - self.merge_t) / self.merge_duration, 0.0, 1.0)
        w = 0.5 - 0.5 * np.cos(np.pi * u)
        return self.offset0 + (self.offset1 - self.offset0) * w


@dataclass(frozen=True)
class ObjectScript:
    id: int
    kind: str
    length: float
    profile: LongitudinalProfile
    lane: LaneProfile

    def state(self, t: float) -> Tuple[float, float, float, float]:
        s, v, a = self.profile.state(t)
        return s, v, a, self.lane.at(t)


@dataclass(frozen=True)
class FollowerParams:
    gap0: float
    v0: float
    headway: float
    reaction: float
    length: float = 4.5


@dataclass(frozen=True)
class ScenarioSpec:
    family: str
    seed: int
    duration: float
    sampled_params: Dict[str, Any]
    calibration_version: str = ""


@dataclass
class ScenarioScripts:
    ego_v0: float
    v_set: float
    objects: List[ObjectScript]
    event_time: float
    follower: Optional[FollowerParams] = None
    kappa: float = 1.0
    lane_noise_scale: float = 1.0


# --------------------------------------------------------------------------
# sampling


def _rng(family: str, seed: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(FAMILIES.index(family),))
    return np.random.Generator(np.random.PCG64(ss))


def _u(rng: np.random.Generator, rng_or_value) -> float:
    if isinstance(rng_or_value, (list, tuple)):
        lo, hi = rng_or_value
        return float(lo + (hi - lo) * rng.random())
    rng.random()  # keep the draw sequence independent of which keys are pinned
    return float(rng_or_value)


def _sample_highway(rng, c):
    p = {}
    p["ego_v0"] = _u(rng, c["ego_v0"])
    p["lead_gap0"] = _u(rng, c["lead_gap0"])
    p["lead_dv0"] = _u(rng, c["lead_dv0"])
    p["wave_amp"] = _u(rng, c["wave_amp"])
    p["wave_period"] = _u(rng, c["wave_period"])
    p["wave_phase"] = float(rng.random())
    p["hazard"] = bool(rng.random() < c["hazard_prob"])
    p["hazard_t"] = _u(rng, c["hazard_t"])
    p["hazard_v_final"] = _u(rng, c["hazard_v_final"])
    p["hazard_decel"] = float(c["hazard_decel"])
    p["v_set"] = p["ego_v0"] + float(c["v_set_margin"])
    return p


def _sample_curved(rng, c):
    p = _sample_highway(rng, c)
    p["kappa"] = float(c["kappa"])
    p["lane_noise_scale"] = float(c["lane_noise_scale"])
    return p


def _sample_stop_and_go(rng, c, duration):
    p = {"v_high": _u(rng, c["v_high"]), "gap0_offset": _u(rng, c["gap0_offset"])}
    cycles = []
    t = 0.0
    while t < duration:
        cyc = {
            "cruise": _u(rng, c["cruise_time"]),
            "decel": _u(rng, c["decel"]),
            "stop": _u(rng, c["stop_time"]),
            "accel": _u(rng, c["accel"]),
        }
        cycles.append(cyc)
        t += cyc["cruise"] + p["v_high"] / cyc["decel"] + cyc["stop"] + p["v_high"] / cyc["accel"]
    p["cycles"] = cycles
    p["v_set"] = p["v_high"] + float(c["v_set_margin"])
    return p


def _sample_cut_in(rng, c):
    p = {
        "ego_v0": _u(rng, c["ego_v0"]),
        "cut_gap": _u(rng, c["cut_gap"]),
        "cut_dv": _u(rng, c["cut_dv"]),
        "merge_t": _u(rng, c["merge_t"]),
        "merge_duration": _u(rng, c["merge_duration"]),
        "lane_width": float(c["lane_width"]),
        "side": 1.0 if rng.random() < 0.5 else -1.0,
    }
    p["v_set"] = p["ego_v0"] + float(c["v_set_margin"])
    return p


def _sample_parked(rng, c):
    p = {
        "ego_v0": _u(rng, c["ego_v0"]),
        "distance0": _u(rng, c["distance0"]),
        "lane_offset": _u(rng, c["lane_offset"]),
        "side": 1.0 if rng.random() < 0.5 else -1.0,
        "event_gap": float(c["event_gap"]),
    }
    p["v_set"] = p["ego_v0"]
    return p


def _sample_multi(rng, c):
    p = {
        "ego_v0": _u(rng, c["ego_v0"]),
        "lead_gap0": _u(rng, c["lead_gap0"]),
        "lead_dv0": _u(rng, c["lead_dv0"]),
        "wave_amp": _u(rng, c["wave_amp"]),
        "wave_period": _u(rng, c["wave_period"]),
        "wave_phase": float(rng.random()),
        "lead2_spacing": _u(rng, c["lead2_spacing"]),
        "lead2_dv": _u(rng, c["lead2_dv"]),
        "adjacent_gap": _u(rng, c["adjacent_gap"]),
        "adjacent_dv": _u(rng, c["adjacent_dv"]),
        "adjacent_side": 1.0 if rng.random() < 0.5 else -1.0,
        "follower_gap": _u(rng, c["follower_gap"]),
        "follower_headway": _u(rng, c["follower_headway"]),
        "follower_reaction": _u(rng, c["follower_reaction"]),
        "event_t": _u(rng, c["event_t"]),
    }
    p["v_set"] = p["ego_v0"] + float(c["v_set_margin"])
    return p


def sample(family: str, seed: int, duration: float = 40.0,
           calibration: Optional[Mapping[str, Any]] = None) -> ScenarioSpec:
    """Draw the family's parameters for ``seed``; same inputs, same spec."""
    if family not in FAMILIES:
        raise ConfigurationError(f"unknown scenario family {family!r}; expected one of {FAMILIES}")
    if not duration > 0:
        raise ConfigurationError("scenario duration must be positive")
    cal = calibration if calibration is not None else _shipped_calibration()
    c = cal[family]
    rng = _rng(family, seed)
    if family == "HighwayFollowing":
        p = _sample_highway(rng, c)
    elif family == "CurvedRoad":
        p = _sample_curved(rng, c)
    elif family == "StopAndGo":
        p = _sample_stop_and_go(rng, c, duration)
    elif family == "CutIn":
        p = _sample_cut_in(rng, c)
    elif family == "ParkedVehicle":
        p = _sample_parked(rng, c)
    else:
        p = _sample_multi(rng, c)
    return ScenarioSpec(family, int(seed), float(duration), p, str(cal.get("version", "")))


# --------------------------------------------------------------------------
# scripts


def _wave_maneuvers(v_mean, amp, period, phase, t_end, t_start=0.0):
    """Gentle speed waves between v_mean +/- amp; each ramp takes a quarter period."""
    if amp <= 0:
        return []
    accel = 2.0 * amp / (0.25 * period)
    half = 0.5 * period
    out = []
    t = t_start + phase * half
    up = True
    while t < t_end:
        target = v_mean + amp if up else v_mean - amp
        out.append(Maneuver(t, accel if up else -accel, target))
        up = not up
        t += half
    return out


def _highway_scripts(p, duration) -> ScenarioScripts:
    v_lead = p["ego_v0"] + p["lead_dv0"]
    t_cut = p["hazard_t"] if p["hazard"] else duration
    man = _wave_maneuvers(v_lead, p["wave_amp"], p["wave_period"], p["wave_phase"], t_cut)
    if p["hazard"]:
        man.append(Maneuver(p["hazard_t"], p["hazard_decel"], p["hazard_v_final"]))
    lead = ObjectScript(1, "vehicle", 4.5, LongitudinalProfile(p["lead_gap0"], v_lead, man), LaneProfile())
    return ScenarioScripts(p["ego_v0"], p["v_set"], [lead], p["hazard_t"],
                           kappa=p.get("kappa", 1.0), lane_noise_scale=p.get("lane_noise_scale", 1.0))


def _stop_and_go_scripts(p, duration) -> ScenarioScripts:
    vh = p["v_high"]
    man = []
    t = 0.0
    first_decel = None
    for cyc in p["cycles"]:
        t += cyc["cruise"]
        if first_decel is None:
            first_decel = t
        man.append(Maneuver(t, -cyc["decel"], 0.0))
        t += vh / cyc["decel"] + cyc["stop"]
        man.append(Maneuver(t, cyc["accel"], vh))
        t += vh / cyc["accel"]
    gap0 = 2.0 + 1.8 * vh + p["gap0_offset"]
    lead = ObjectScript(1, "vehicle", 4.5, LongitudinalProfile(gap0, vh, man), LaneProfile())
    return ScenarioScripts(vh, p["v_set"], [lead], first_decel if first_decel is not None else 0.0)


def _cut_in_scripts(p, duration) -> ScenarioScripts:
    v0 = p["ego_v0"]
    vc = v0 + p["cut_dv"]
    # positioned so the gap to a nominal (constant-speed) ego equals cut_gap at merge start
    s0 = p["cut_gap"] - p["cut_dv"] * p["merge_t"]
    lane = LaneProfile(p["side"] * p["lane_width"], p["merge_t"], p["merge_duration"], 0.0)
    cutter = ObjectScript(1, "vehicle", 4.5, LongitudinalProfile(s0, vc), lane)
    return ScenarioScripts(v0, p["v_set"], [cutter], p["merge_t"])


def _parked_scripts(p, duration) -> ScenarioScripts:
    v0 = p["ego_v0"]
    obj = ObjectScript(1, "parked", 4.5, LongitudinalProfile(p["distance0"], 0.0),
                       LaneProfile(p["side"] * p["lane_offset"]))
    event = max(0.0, (p["distance0"] - p["event_gap"]) / v0)
    return ScenarioScripts(v0, p["v_set"], [obj], event)


def _multi_scripts(p, duration) -> ScenarioScripts:
    v0 = p["ego_v0"]
    v1 = v0 + p["lead_dv0"]
    man = _wave_maneuvers(v1, p["wave_amp"], p["wave_period"], p["wave_phase"], duration)
    lead1 = ObjectScript(1, "vehicle", 4.5, LongitudinalProfile(p["lead_gap0"], v1, man), LaneProfile())
    # lead2 rides ahead at a speed at least the lead's peak so the pair never closes
    v2 = v1 + p["wave_amp"] + p["lead2_dv"]
    s2 = p["lead_gap0"] + 4.5 + p["lead2_spacing"]
    lead2 = ObjectScript(2, "vehicle", 4.5, LongitudinalProfile(s2, v2), LaneProfile())
    adj = ObjectScript(3, "vehicle", 4.5, LongitudinalProfile(p["adjacent_gap"], v0 + p["adjacent_dv"]),
                       LaneProfile(p["adjacent_side"] * 3.5))
    follower = FollowerParams(p["follower_gap"], v0, p["follower_headway"], p["follower_reaction"])
    return ScenarioScripts(v0, p["v_set"], [lead1, lead2, adj], p["event_t"], follower=follower)


_BUILDERS = {
    "HighwayFollowing": _highway_scripts,
    "CurvedRoad": _highway_scripts,
    "StopAndGo": _stop_and_go_scripts,
    "CutIn": _cut_in_scripts,
    "ParkedVehicle": _parked_scripts,
    "MultiVehicle": _multi_scripts,
}


def build_scripts(spec: ScenarioSpec) -> ScenarioScripts:
    """Traffic scripts and ego initial conditions for a sampled spec.

    Object positions are relative to the ego front bumper at t = 0 (the ego
    starts at s_front = 0).
    """
    try:
        builder = _BUILDERS[spec.family]
    except KeyError:
        raise ConfigurationError(f"unknown scenario family {spec.family!r}") from None
    return builder(spec.sampled_params, spec.duration)
