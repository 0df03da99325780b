"""Lightweight gap-domain tracker: greedy gated association + alpha-beta filter.

Conventions borrowed from SORT-style trackers:

* ``age_frames`` is the current run of consecutive matched frames. A track
  that coasts keeps its count while coasting, but the streak restarts at 1
  when it is matched again.
* A track whose streak is below ``confirm_frames`` is tentative and is
  deleted on its first miss instead of coasting. Confirmed tracks coast
  for up to ``drop_after_missed`` frames.
* New tracks start with ``age_frames = 1`` and ``v_rel_est = 0``; that reset
  is what delays braking when a lost lead reappears.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from .errors import ConfigurationError
from .perception import Detection


@dataclass(frozen=True)
class TrackerConfig:
    gate_radius: float = 2.5
    drop_after_missed: int = 1
    alpha: float = 0.85
    beta: float = 0.4
    dt: float = 0.1
    lane_gate: float = 1.0
    length_ratio_tol: float = 0.5
    lane_alpha: float = 0.5
    confirm_frames: int = 2

    def __post_init__(self):
        if not self.gate_radius > 0:
            raise ConfigurationError("gate_radius must be positive")
        if self.drop_after_missed < 1:
            raise ConfigurationError("drop_after_missed must be >= 1")
        if not (0 < self.alpha <= 1 and 0 < self.beta <= 1):
            raise ConfigurationError("alpha and beta must lie in (0, 1]")
        if not self.dt > 0:
            raise ConfigurationError("tracker dt must be positive")
        if self.confirm_frames < 1:
            raise ConfigurationError("confirm_frames must be >= 1")


@dataclass(slots=True)
class Track:
    track_id: int
    gap_est: float
    v_rel_est: float  # closing speed, positive when the gap shrinks
    lane_offset_est: float
    age_frames: int = 1
    missed_frames: int = 0
    confidence: float = 1.0
    length_est: float = 4.5

    def predicted_gap(self, dt: float) -> float:
        return self.gap_est - self.v_rel_est * dt


@dataclass
class Assignment:
    pairs: List[Tuple[int, int]]  # (track index, detection index)
    unmatched_tracks: List[int]
    unmatched_detections: List[int]


def _compatible(track: Track, det: Detection, cfg: TrackerConfig) -> bool:
    if abs(track.lane_offset_est - det.perceived_lane_offset) >= cfg.lane_gate:
        return False
    ratio = det.bbox_length / track.length_est
    return abs(ratio - 1.0) <= cfg.length_ratio_tol


def associate(tracks: Sequence[Track], dets: Sequence[Detection], cfg: TrackerConfig) -> Assignment:
    """Greedy nearest-neighbour association on predicted gap.

    Candidate pairs must lie strictly inside the gate and pass the
    lane/length overlap test. Pairs are taken in order of distance, then
    track id, then detection index.
    """
    cands = []
    for i, trk in enumerate(tracks):
        pred = trk.predicted_gap(cfg.dt)
        for j, det in enumerate(dets):
            d = abs(det.perceived_gap - pred)
            if d < cfg.gate_radius and _compatible(trk, det, cfg):
                cands.append((d, trk.track_id, j, i))
    cands.sort()
    used_t = set()
    used_d = set()
    pairs = []
    for _, _, j, i in cands:
        if i in used_t or j in used_d:
            continue
        used_t.add(i)
        used_d.add(j)
        pairs.append((i, j))
    pairs.sort()
    return Assignment(
        pairs,
        [i for i in range(len(tracks)) if i not in used_t],
        [j for j in range(len(dets)) if j not in used_d],
    )


def update_tracks(tracks: Sequence[Track], assignment: Assignment, dets: Sequence[Detection],
                  cfg: TrackerConfig, dt: float, next_id: int) -> Tuple[List[Track], int]:
    """Apply one frame of filter updates; returns (live tracks, next free id).

    Input tracks are not modified.
    """
    if not dt > 0:
        raise ConfigurationError("tracker update needs dt > 0")
    a, b = cfg.alpha, cfg.beta
    out: List[Track] = []
    for i, j in assignment.pairs:
        trk = tracks[i]
        det = dets[j]
        pred = trk.gap_est - trk.v_rel_est * dt
        r = det.perceived_gap - pred
        out.append(Track(
            trk.track_id,
            pred + a * r,
            trk.v_rel_est - (b / dt) * r,
            trk.lane_offset_est + cfg.lane_alpha * (det.perceived_lane_offset - trk.lane_offset_est),
            trk.age_frames + 1 if trk.missed_frames == 0 else 1,
            0,
            det.confidence,
            trk.length_est + 0.5 * (det.bbox_length - trk.length_est),
        ))
    for i in assignment.unmatched_tracks:
        trk = tracks[i]
        missed = trk.missed_frames + 1
        if trk.missed_frames == 0 and trk.age_frames < cfg.confirm_frames:
            continue  # tentative: no coasting
        if missed > cfg.drop_after_missed:
            continue
        out.append(Track(trk.track_id, trk.gap_est - trk.v_rel_est * dt, trk.v_rel_est, trk.lane_offset_est,
                         trk.age_frames, missed, trk.confidence, trk.length_est))
    for j in assignment.unmatched_detections:
        det = dets[j]
        out.append(Track(next_id, det.perceived_gap, 0.0, det.perceived_lane_offset, 1, 0,
                         det.confidence, det.bbox_length))
        next_id += 1
    out.sort(key=lambda t: t.track_id)
    return out, next_id


def primary_object(tracks: Sequence[Track], lane_threshold: float = 1.5) -> Optional[Track]:
    """Nearest live in-lane track (coasting tracks included)."""
    best = None
    for trk in tracks:
        if abs(trk.lane_offset_est) < lane_threshold and (best is None or trk.gap_est < best.gap_est):
            best = trk
    return best


class Tracker:
    """Per-run tracker state: live tracks and the id counter."""

    def __init__(self, cfg: TrackerConfig):
        self.cfg = cfg
        self.tracks: List[Track] = []
        self.next_id = 1

    def step(self, dets: Sequence[Detection]) -> List[Track]:
        asg = associate(self.tracks, dets, self.cfg)
        self.tracks, self.next_id = update_tracks(self.tracks, asg, dets, self.cfg, self.cfg.dt, self.next_id)
        return self.tracks
