"""Per-run metric extraction from traces and cross-run aggregation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import SchemaVersionError, TraceError

TRACE_SCHEMA_VERSION = "aebsim-trace/1"

TRACE_COLUMNS = (
    "t", "s_front", "v", "a_realized", "a_cmd", "source", "eb_active",
    "truth_gap", "truth_vrel", "truth_ttc", "perceived_gap", "perceived_vrel",
    "track_id", "track_age", "track_missed", "instability",
    "follower_gap", "follower_v", "attack_active",
)

OSC_WINDOW_S = 1.5
OSC_MAGNITUDE = 2.0
FALSE_EB_SLACK_S = 0.5
FOLLOWER_WINDOW_S = 3.0
Z95 = 1.959963984540054


@dataclass
class Trace:
    """Columnar per-frame trace plus run-level metadata."""
    meta: Dict[str, Any]
    columns: Dict[str, list]

    def __len__(self):
        return len(self.columns["t"])


@dataclass
class RunMetrics:
    collision: bool
    collision_t: Optional[float]
    impact_speed: Optional[float]
    min_gap: float
    min_ttc_truth: float
    min_ttc_perceived: float
    eb_event_count: int
    false_eb_count: int
    peak_decel: float
    peak_jerk: float
    mean_abs_jerk: float
    oscillatory_window_count: int
    oscillatory: bool
    brake_onset_delay: Optional[float]
    early_brake: bool
    mean_speed: float
    travel_time: float
    min_follower_headway: Optional[float]
    follower_headway_after_false_eb: Optional[float]
    follower_collision: bool = False
    eb_onset_truth_ttc: List[float] = field(default_factory=list)
    eb_peak_decels: List[float] = field(default_factory=list)
    eb_false_flags: List[bool] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunMetrics":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# --------------------------------------------------------------------------
# series primitives


def jerk_series(accel: Sequence[float], dt: float) -> np.ndarray:
    """Forward differences ``(a[k+1] - a[k]) / dt``; one sample shorter than the input."""
    a = np.asarray(accel, dtype=float)
    if a.size < 2:
        raise ValueError("jerk_series needs at least two samples")
    return np.diff(a) / dt


def _qualifying_changes(series: Sequence[float], magnitude: float) -> np.ndarray:
    a = np.asarray(series, dtype=float)
    if a.size < 2:
        return np.zeros(0, dtype=np.int64)
    x, y = a[:-1], a[1:]
    return ((x * y < 0) & (np.abs(x) >= magnitude) & (np.abs(y) >= magnitude)).astype(np.int64)


def detect_oscillations(accel: Sequence[float], dt: float, window_s: float = OSC_WINDOW_S,
                        magnitude: float = OSC_MAGNITUDE) -> Tuple[int, bool]:
    """Count de-overlapped 1.5 s windows holding >= 2 qualifying sign changes.

    A qualifying change is a consecutive sample pair of opposite sign with
    both magnitudes >= ``magnitude``. The window starting at sample ``s``
    covers the pairs ``s .. s+W-1`` (W = window_s/dt), i.e. samples spanning
    exactly ``window_s``. After a window counts, scanning resumes at its
    first unused pair.
    """
    q = _qualifying_changes(accel, magnitude)
    n_pairs = q.size
    w = max(1, int(round(window_s / dt)))
    csum = np.concatenate(([0], np.cumsum(q)))
    count = 0
    s = 0
    while s < n_pairs:
        end = min(s + w, n_pairs)
        if csum[end] - csum[s] >= 2:
            count += 1
            s = end
        else:
            s += 1
    return count, count >= 1


def brake_onset_delay(t: Sequence[float], truth_ttc: Sequence[float], eb_active: Sequence[bool],
                      ttc_threshold: float, collision_t: Optional[float] = None) -> Tuple[Optional[float], bool]:
    """Seconds from the first ground-truth TTC crossing to the first EB frame.

    Returns ``(delay, early)``. ``delay`` is None when the ground truth never
    crosses. If it crosses and EB never fires before a collision, the delay is
    censored at the impact time. Negative delays (EB ahead of the crossing)
    are reported as 0 with ``early`` set.
    """
    t_cross = next((ti for ti, x in zip(t, truth_ttc) if x < ttc_threshold), None)
    if t_cross is None:
        return None, False
    t_eb = next((ti for ti, e in zip(t, eb_active) if e), None)
    if t_eb is None:
        if collision_t is not None:
            return round(collision_t - t_cross, 9), False
        return None, False
    d = round(t_eb - t_cross, 9)  # frame-grid differences; drop the float residue
    if d < 0:
        return 0.0, True
    return d, False


def _episodes(flags: Sequence[bool]) -> List[Tuple[int, int]]:
    out = []
    start = None
    for i, f in enumerate(flags):
        if f and start is None:
            start = i
        elif not f and start is not None:
            out.append((start, i - 1))
            start = None
    if start is not None:
        out.append((start, len(flags) - 1))
    return out


def _ttc(g: float, v: float) -> float:
    if v > 0.01:
        return max(g, 0.0) / v
    return math.inf


# --------------------------------------------------------------------------
# per-run


def compute_run_metrics(trace: Trace) -> RunMetrics:
    meta = trace.meta
    if meta.get("schema_version") != TRACE_SCHEMA_VERSION:
        raise SchemaVersionError(meta.get("schema_version"), TRACE_SCHEMA_VERSION)
    cols = trace.columns
    n = len(cols["t"])
    if n == 0 or n != int(meta["n_frames"]) or any(len(cols[c]) != n for c in TRACE_COLUMNS):
        raise TraceError(f"truncated trace: {n} rows, header promises {meta.get('n_frames')}")

    dt = float(meta["frame_dt"])
    thr = float(meta["ttc_threshold"])
    t = cols["t"]
    a_real = cols["a_realized"]
    eb = [bool(x) for x in cols["eb_active"]]
    truth_ttc = cols["truth_ttc"]

    collision = bool(meta.get("collision", False))
    collision_t = meta.get("collision_t") if collision else None
    impact = meta.get("impact_speed") if collision else None

    finite_gaps = [g for g in cols["truth_gap"] if math.isfinite(g)]
    min_gap = min(finite_gaps) if finite_gaps else math.inf
    min_ttc_truth = min(truth_ttc)
    if collision:
        min_gap = min(min_gap, 0.0)
        min_ttc_truth = 0.0
    perceived = [_ttc(g, v) for g, v, tid in zip(cols["perceived_gap"], cols["perceived_vrel"], cols["track_id"])
                 if tid >= 0]
    min_ttc_perceived = min(perceived) if perceived else math.inf

    onset_ttc, peaks, false_flags = [], [], []
    follower_after = []
    lag_frames = int(round(FALSE_EB_SLACK_S / dt))
    for i0, i1 in _episodes(eb):
        lo_t = t[i0] - FALSE_EB_SLACK_S
        hi_t = t[i1] + FALSE_EB_SLACK_S
        genuine = any(x < thr for ti, x in zip(t, truth_ttc) if lo_t - 1e-9 <= ti <= hi_t + 1e-9)
        false_flags.append(not genuine)
        # onset tolerance matches the false-EB slack: perceived TTC lags truth by a few frames
        onset_ttc.append(min(x for ti, x in zip(t, truth_ttc)
                             if t[i0] - FALSE_EB_SLACK_S - 1e-9 <= ti <= t[i0] + FALSE_EB_SLACK_S + 1e-9))
        seg = a_real[i0:min(n, i1 + lag_frames + 1)]
        peaks.append(max(0.0, -min(seg)))
        if not genuine:
            hs = [g / v for ti, g, v in zip(t, cols["follower_gap"], cols["follower_v"])
                  if t[i0] <= ti <= t[i0] + FOLLOWER_WINDOW_S + 1e-9 and math.isfinite(g) and v > 0.1]
            if hs:
                follower_after.append(min(hs))

    if n >= 2:
        j = np.abs(jerk_series(a_real, dt))
        peak_jerk = float(j.max())
        mean_abs_jerk = float(j.mean())
    else:
        peak_jerk = mean_abs_jerk = 0.0
    osc_count, osc = detect_oscillations(cols["a_cmd"], dt)
    delay, early = brake_onset_delay(t, truth_ttc, eb, thr, collision_t)
    mean_speed = float(np.mean(cols["v"]))
    travel_time = 1000.0 / mean_speed if mean_speed > 0 else math.inf

    if meta.get("has_follower"):
        hs = [g / v for g, v in zip(cols["follower_gap"], cols["follower_v"]) if math.isfinite(g) and v > 0.1]
        min_follower = min(hs) if hs else None
    else:
        min_follower = None

    return RunMetrics(
        collision=collision,
        collision_t=collision_t,
        impact_speed=impact,
        min_gap=float(min_gap),
        min_ttc_truth=float(min_ttc_truth),
        min_ttc_perceived=float(min_ttc_perceived),
        eb_event_count=len(false_flags),
        false_eb_count=sum(false_flags),
        peak_decel=float(max(0.0, -min(a_real))),
        peak_jerk=peak_jerk,
        mean_abs_jerk=mean_abs_jerk,
        oscillatory_window_count=osc_count,
        oscillatory=osc,
        brake_onset_delay=delay,
        early_brake=early,
        mean_speed=mean_speed,
        travel_time=travel_time,
        min_follower_headway=min_follower,
        follower_headway_after_false_eb=min(follower_after) if follower_after else None,
        follower_collision=bool(meta.get("follower_collision", False)),
        eb_onset_truth_ttc=onset_ttc,
        eb_peak_decels=peaks,
        eb_false_flags=false_flags,
    )


# --------------------------------------------------------------------------
# aggregation


def wilson_interval(k: int, n: int, z: float = Z95) -> Tuple[float, float]:
    if n <= 0:
        raise ValueError("wilson_interval needs n > 0")
    p = k / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


RATE_FIELDS = {
    "collision": lambda m: m.collision,
    "eb": lambda m: m.eb_event_count > 0,
    "false_eb": lambda m: m.false_eb_count > 0,
    "oscillatory": lambda m: m.oscillatory,
}

CONTINUOUS_FIELDS = (
    "min_gap", "min_ttc_truth", "min_ttc_perceived", "peak_decel", "peak_jerk", "mean_abs_jerk",
    "mean_speed", "travel_time", "brake_onset_delay", "min_follower_headway",
)


def _summary(values: List[float]) -> Dict[str, Optional[float]]:
    vals = sorted(v for v in values if v is not None and math.isfinite(v))
    if not vals:
        return {"n": 0, "mean": None, "std": None, "p50": None, "p95": None}
    arr = np.asarray(vals)
    mean = math.fsum(vals) / len(vals)
    var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
    return {
        "n": len(vals),
        "mean": mean,
        "std": math.sqrt(var),
        "p50": float(np.percentile(arr, 50)),
        "p95": float(np.percentile(arr, 95)),
    }


def summarize_group(metrics: Sequence[RunMetrics]) -> Dict[str, Any]:
    n = len(metrics)
    if n == 0:
        raise ValueError("cannot summarise an empty group")
    row: Dict[str, Any] = {"runs": n}
    for name, pred in RATE_FIELDS.items():
        k = sum(1 for m in metrics if pred(m))
        lo, hi = wilson_interval(k, n)
        row[f"{name}_count"] = k
        row[f"{name}_rate"] = k / n
        row[f"{name}_ci_lo"] = lo
        row[f"{name}_ci_hi"] = hi
    row["false_eb_episodes"] = sum(m.false_eb_count for m in metrics)
    row["eb_episodes"] = sum(m.eb_event_count for m in metrics)
    for name in CONTINUOUS_FIELDS:
        row[name] = _summary([getattr(m, name) for m in metrics])
    return row


def aggregate(groups: Mapping[Tuple[str, str], Sequence[RunMetrics]]) -> List[Dict[str, Any]]:
    """One summary row per (family, condition), sorted by key."""
    rows = []
    for (family, condition) in sorted(groups):
        row = {"family": family, "condition": condition}
        row.update(summarize_group(groups[(family, condition)]))
        rows.append(row)
    return rows
