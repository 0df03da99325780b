"""Object-level LiDAR channel: benign detections plus attack-effect injectors.

Errors are injected on the detector output, never on point clouds. Detections
are anonymous; the injectors find the lead's detection by matching it to the
ground truth they are handed, which the tracker never sees.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .dynamics import WorldState, gap
from .errors import ConfigurationError

ATTACK_KINDS = ("none", "false_negative", "false_positive", "distance_bias", "flicker")


@dataclass(frozen=True, slots=True)
class Detection:
    perceived_gap: float
    perceived_lane_offset: float
    bbox_length: float
    confidence: float
    frame_index: int


@dataclass(frozen=True)
class SensorConfig:
    range_max: float = 120.0
    range_noise_sigma: float = 0.1
    base_drop_prob: float = 0.005
    frame_rate: float = 10.0
    lane_noise_sigma: float = 0.05
    length_noise_sigma: float = 0.05
    confidence: float = 0.95

    def __post_init__(self):
        if not self.range_max > 0:
            raise ConfigurationError("range_max must be positive")
        if self.range_noise_sigma < 0 or self.lane_noise_sigma < 0 or self.length_noise_sigma < 0:
            raise ConfigurationError("noise sigmas must be non-negative")
        if not 0.0 <= self.base_drop_prob < 1.0:
            raise ConfigurationError("base_drop_prob must lie in [0, 1)")
        if not self.frame_rate > 0:
            raise ConfigurationError("frame_rate must be positive")


@dataclass(frozen=True)
class AttackSpec:
    """One attack effect with concrete timing.

    ``kind`` selects the variant; fields that do not apply to it are ignored.
    ``start_t``/``duration`` bound the active window ``[start_t, start_t +
    duration)``; distance bias is always on.
    """
    kind: str = "none"
    start_t: float = 0.0
    duration: float = 0.0
    phantom_gap: float = 12.0
    phantom_rel_speed: Optional[float] = None  # None: static obstacle, closes at ego speed
    phantom_length: float = 4.5
    factor: float = 1.0
    pattern: str = "alternate"
    drop_prob: float = 0.5

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.duration < 0:
            raise ConfigurationError("attack duration must be >= 0")
        if not self.factor > 0:
            raise ConfigurationError("distance bias factor must be > 0")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ConfigurationError("flicker drop_prob must lie in [0, 1]")
        if self.pattern not in ("alternate", "random"):
            raise ConfigurationError(f"unknown flicker pattern {self.pattern!r}")

    def active(self, t: float) -> bool:
        # frame times are multiples of 0.1 s; the epsilon keeps 5.0 + 0.5 from
        # landing on the wrong side of the boundary.
        return self.start_t - 1e-9 <= t < self.start_t + self.duration - 1e-9


NO_ATTACK = AttackSpec()


class NoiseTape:
    """Pre-drawn benign sensor noise indexed by (object id, frame).

    Drawing per (object, frame) rather than per call keeps the noise identical
    across conditions even when the set of visible objects differs.
    """

    def __init__(self, seed: int, object_ids: Sequence[int], n_frames: int):
        ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(1001,))
        rng = np.random.Generator(np.random.PCG64(ss))
        self._rows = {}
        for oid in sorted(object_ids):
            draws = rng.standard_normal((n_frames, 3))
            u = rng.random(n_frames)
            self._rows[oid] = (draws[:, 0].tolist(), draws[:, 1].tolist(), draws[:, 2].tolist(), u.tolist())

    def draw(self, obj_id: int, frame: int) -> Tuple[float, float, float, float]:
        g, l, n, u = self._rows[obj_id]
        return g[frame], l[frame], n[frame], u[frame]


def _draw(rng, obj_id: int, frame: int) -> Tuple[float, float, float, float]:
    if isinstance(rng, NoiseTape):
        return rng.draw(obj_id, frame)
    z = rng.standard_normal(3)
    return float(z[0]), float(z[1]), float(z[2]), float(rng.random())


def sense(world: WorldState, cfg: SensorConfig, rng: Union[np.random.Generator, NoiseTape],
          frame: int = 0, lane_noise_scale: float = 1.0) -> List[Detection]:
    """Benign detections of forward objects within range, in world order."""
    ego = world.ego
    out = []
    for obj in world.objects:
        g = gap(ego, obj)
        if not (0.0 < g <= cfg.range_max):
            continue
        ng, nl, nn, u = _draw(rng, obj.id, frame)
        if u < cfg.base_drop_prob:
            continue
        out.append(Detection(
            g + cfg.range_noise_sigma * ng,
            obj.lane_offset + cfg.lane_noise_sigma * lane_noise_scale * nl,
            max(0.1, obj.length + cfg.length_noise_sigma * nn),
            cfg.confidence,
            frame,
        ))
    return out


def curvature_bias_multiplier(scenario_family: str, kappa: float = 1.5) -> float:
    """Amplification applied to ``|factor - 1|`` of a distance bias."""
    if scenario_family == "CurvedRoad":
        if kappa < 1.0:
            raise ConfigurationError("curvature multiplier must be >= 1")
        return kappa
    return 1.0


def effective_bias_factor(factor: float, kappa: float) -> float:
    return 1.0 + kappa * (factor - 1.0)


def lead_object(world: WorldState, lane_threshold: float = 1.5):
    """Nearest in-lane object strictly ahead of the ego, or None."""
    best = None
    best_gap = math.inf
    for obj in world.objects:
        g = gap(world.ego, obj)
        if g > 0.0 and abs(obj.lane_offset) < lane_threshold and g < best_gap:
            best, best_gap = obj, g
    return best


def _lead_detection_index(dets: Sequence[Detection], world: WorldState, lane_threshold: float,
                          tolerance: float = 2.0) -> Optional[int]:
    lead = lead_object(world, lane_threshold)
    if lead is None:
        return None
    g = gap(world.ego, lead)
    best, best_d = None, tolerance
    for i, d in enumerate(dets):
        dist = abs(d.perceived_gap - g) + abs(d.perceived_lane_offset - lead.lane_offset)
        if dist < best_d:
            best, best_d = i, dist
    return best


def apply_attack(dets: List[Detection], world: WorldState, spec: AttackSpec, t: float, frame: int,
                 rng=None, kappa: float = 1.0, lane_threshold: float = 1.5,
                 phantom_speed: Optional[float] = None, frame_rate: float = 10.0) -> List[Detection]:
    """Apply one attack effect to the frame's benign detections.

    ``rng`` is only consulted by random-pattern flicker: a NoiseTape-like
    object exposing ``attack_uniform(frame)`` or a numpy Generator.
    ``phantom_speed`` is the closing speed used for a static phantom; the run
    loop passes the ego speed at injection onset.
    """
    kind = spec.kind
    if kind == "none":
        return dets
    if kind == "distance_bias":
        f = effective_bias_factor(spec.factor, kappa)
        return [Detection(d.perceived_gap * f, d.perceived_lane_offset, d.bbox_length, d.confidence,
                          d.frame_index) for d in dets]
    if not spec.active(t):
        return dets
    if kind == "false_positive":
        rel = spec.phantom_rel_speed
        if rel is None:
            rel = phantom_speed if phantom_speed is not None else world.ego.v
        g = spec.phantom_gap - rel * (t - spec.start_t)
        if g <= 0.0:
            return dets
        return dets + [Detection(g, 0.0, spec.phantom_length, 0.9, frame)]
    idx = _lead_detection_index(dets, world, lane_threshold)
    if idx is None:
        return dets
    if kind == "false_negative":
        drop = True
    else:  # flicker
        k = frame - math.ceil(spec.start_t * frame_rate - 1e-6)
        if spec.pattern == "alternate":
            drop = k % 2 == 0
        else:
            if hasattr(rng, "attack_uniform"):
                u = rng.attack_uniform(frame)
            elif rng is not None:
                u = float(rng.random())
            else:
                raise ConfigurationError("random flicker needs an rng")
            drop = u < spec.drop_prob
    if not drop:
        return dets
    return dets[:idx] + dets[idx + 1:]
