"""Named batch-level assertions over run records.

Each check reads the records of one or more condition labels and returns a
``CheckResult`` carrying the numbers it compared, so a failing check says by
how much it missed. Configs request checks by name; the CLI exits non-zero
when any requested check fails.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .metrics import FOLLOWER_WINDOW_S, RunMetrics

HIGHWAY = "HighwayFollowing"
SAFEGUARD_SUFFIX = "+sg"


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    values: Dict[str, Any] = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "passed": self.passed, "detail": self.detail, "values": self.values}


class MissingData(LookupError):
    pass


def _select(records, condition: str, family: Optional[str] = None) -> List[Any]:
    out = [r for r in records if r.ok and r.condition == condition and (family is None or r.family == family)]
    if not out:
        where = f" for {family}" if family else ""
        raise MissingData(f"no successful runs of condition {condition!r}{where}")
    return out


def _metrics(records, condition: str, family: Optional[str] = None) -> List[RunMetrics]:
    return [r.metrics for r in _select(records, condition, family)]


def _rate(ms: Sequence[RunMetrics], pred: Callable[[RunMetrics], bool]) -> float:
    return sum(1 for m in ms if pred(m)) / len(ms)


def _mean(xs) -> float:
    xs = [x for x in xs if x is not None and math.isfinite(x)]
    return math.fsum(xs) / len(xs) if xs else math.nan


def _median(xs) -> float:
    xs = [x for x in xs if x is not None and math.isfinite(x)]
    return float(np.median(xs)) if xs else math.nan


def _guarded(name: str, fn: Callable[..., CheckResult]) -> Callable[..., CheckResult]:
    def run(records, **kw) -> CheckResult:
        try:
            return fn(records, **kw)
        except MissingData as exc:
            return CheckResult(name, False, f"missing data: {exc}")
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


# --------------------------------------------------------------------------
# individual checks


def _baseline_safety(records, baseline: str = "baseline") -> CheckResult:
    """No collisions, EB in 2-15% of runs, every EB onset near a real hazard
    (truth TTC < 1.8 s), no oscillation, peak jerk < 4 in >= 95% of runs."""
    ms = _metrics(records, baseline)
    col = _rate(ms, lambda m: m.collision)
    eb = _rate(ms, lambda m: m.eb_event_count > 0)
    onsets = [x for m in ms for x in m.eb_onset_truth_ttc]
    bad_onsets = sum(1 for x in onsets if not x < 1.8)
    osc = sum(1 for m in ms if m.oscillatory)
    smooth = _rate(ms, lambda m: m.peak_jerk < 4.0)
    ok = col == 0 and 0.02 <= eb <= 0.15 and bad_onsets == 0 and osc == 0 and smooth >= 0.95
    return CheckResult("baseline_safety", ok,
                       f"runs={len(ms)} collision={col:.3f} (=0) eb_rate={eb:.3f} (in [0.02,0.15]) "
                       f"onsets>=1.8s={bad_onsets}/{len(onsets)} (=0) oscillatory={osc} (=0) "
                       f"jerk<4={smooth:.3f} (>=0.95)",
                       dict(runs=len(ms), collision_rate=col, eb_rate=eb, bad_onsets=bad_onsets,
                            onsets=len(onsets), oscillatory_runs=osc, smooth_fraction=smooth))


def _fn_effect(records, attack: str = "fn", baseline: str = "baseline", family: str = HIGHWAY) -> CheckResult:
    """FN collisions >= 10% (baseline 0), median onset delay >= 0.3 s, median
    min truth TTC <= 60% of the baseline median."""
    fn = _metrics(records, attack, family)
    base = _metrics(records, baseline, family)
    col = _rate(fn, lambda m: m.collision)
    base_col = _rate(base, lambda m: m.collision)
    delay = _median([m.brake_onset_delay for m in fn])
    ttc_fn = _median([m.min_ttc_truth for m in fn])
    ttc_base = _median([m.min_ttc_truth for m in base])
    ratio = ttc_fn / ttc_base if ttc_base > 0 else math.nan
    ok = col >= 0.10 and base_col == 0 and delay >= 0.3 and ratio <= 0.6
    return CheckResult("fn_effect", ok,
                       f"{family}: collision={col:.3f} (>=0.10, baseline {base_col:.3f}=0) "
                       f"median_delay={delay:.2f}s (>=0.3) median_min_ttc={ttc_fn:.2f}/{ttc_base:.2f}s "
                       f"ratio={ratio:.2f} (<=0.60)",
                       dict(collision_rate=col, baseline_collision_rate=base_col, median_delay=delay,
                            median_min_ttc=ttc_fn, baseline_median_min_ttc=ttc_base, ttc_ratio=ratio))


def _collision_in_window(r, slack: float) -> bool:
    m = r.metrics
    if not m.collision or m.collision_t is None:
        return False
    a = r.attack or {}
    start = a.get("start_t", 0.0)
    return start <= m.collision_t <= start + a.get("duration", 0.0) + slack


def _fp_effect(records, attack: str = "fp", baseline: str = "baseline", family: str = HIGHWAY,
               follower_family: str = "MultiVehicle") -> CheckResult:
    """FP false-EB in >= 25% of runs, no collision during phantom windows,
    hard (> 6 m/s^2) false-EB episodes more common than hard EB episodes in
    the whole baseline (every family), follower headway < 1.2 s after false braking in >= 10% of follower runs."""
    fp_recs = _select(records, attack, family)
    fp = [r.metrics for r in fp_recs]
    base = _metrics(records, baseline)  # pooled: a single family sees only a handful of baseline EB episodes
    false_rate = _rate(fp, lambda m: m.false_eb_count > 0)
    window_collisions = sum(1 for r in fp_recs if _collision_in_window(r, FOLLOWER_WINDOW_S))
    fp_peaks = [p for m in fp for p, f in zip(m.eb_peak_decels, m.eb_false_flags) if f]
    base_peaks = [p for m in base for p in m.eb_peak_decels]
    hard_fp = sum(1 for p in fp_peaks if p > 6.0) / len(fp_peaks) if fp_peaks else math.nan
    hard_base = sum(1 for p in base_peaks if p > 6.0) / len(base_peaks) if base_peaks else 0.0
    fol = _metrics(records, attack, follower_family)
    close = _rate(fol, lambda m: m.follower_headway_after_false_eb is not None
                  and m.follower_headway_after_false_eb < 1.2)
    ok = false_rate >= 0.25 and window_collisions == 0 and hard_fp > hard_base and close >= 0.10
    return CheckResult("fp_effect", ok,
                       f"{family}: false_eb_rate={false_rate:.3f} (>=0.25) phantom_window_collisions="
                       f"{window_collisions} (=0) hard_false_eb={hard_fp:.3f} vs pooled baseline {hard_base:.3f} (>) "
                       f"n={len(fp_peaks)}/{len(base_peaks)}; {follower_family}: follower_headway<1.2s="
                       f"{close:.3f} (>=0.10)",
                       dict(false_eb_rate=false_rate, phantom_window_collisions=window_collisions,
                            hard_false_eb_fraction=hard_fp, hard_baseline_eb_fraction=hard_base,
                            false_eb_episodes=len(fp_peaks), baseline_eb_episodes=len(base_peaks),
                            follower_close_fraction=close))


def _bias_delay(records, attack: str = "bias_plus", baseline: str = "baseline", family: str = HIGHWAY,
                curved: str = "CurvedRoad") -> CheckResult:
    """Overestimation delays braking by >= 0.2 s on average, more on curves."""
    d_bias = _mean([m.brake_onset_delay for m in _metrics(records, attack, family)])
    d_base = _mean([m.brake_onset_delay for m in _metrics(records, baseline, family)])
    c_bias = _mean([m.brake_onset_delay for m in _metrics(records, attack, curved)])
    c_base = _mean([m.brake_onset_delay for m in _metrics(records, baseline, curved)])
    extra, extra_c = d_bias - d_base, c_bias - c_base
    ok = extra >= 0.2 and extra_c > extra
    return CheckResult("bias_delay", ok,
                       f"{family}: mean_delay {d_bias:.3f} vs {d_base:.3f} s, extra={extra:.3f} (>=0.2); "
                       f"{curved}: extra={extra_c:.3f} (> {extra:.3f})",
                       dict(mean_delay=d_bias, baseline_mean_delay=d_base, extra_delay=extra,
                            curved_extra_delay=extra_c))


def _bias_underestimate(records, attack: str = "bias_minus", baseline: str = "baseline",
                        family: str = "StopAndGo") -> CheckResult:
    """Underestimation raises EB rate >= 1.3x and cuts mean speed to <= 0.95x."""
    b = _metrics(records, attack, family)
    base = _metrics(records, baseline, family)
    eb, eb0 = _rate(b, lambda m: m.eb_event_count > 0), _rate(base, lambda m: m.eb_event_count > 0)
    v, v0 = _mean([m.mean_speed for m in b]), _mean([m.mean_speed for m in base])
    ok = eb >= 1.3 * eb0 and v <= 0.95 * v0
    return CheckResult("bias_underestimate", ok,
                       f"{family}: eb_rate {eb:.3f} vs {eb0:.3f} (>=1.3x) mean_speed {v:.3f} vs {v0:.3f} "
                       f"ratio={v / v0:.3f} (<=0.95)",
                       dict(eb_rate=eb, baseline_eb_rate=eb0, mean_speed=v, baseline_mean_speed=v0))


def _flicker_effect(records, attack: str = "flicker", baseline: str = "baseline", cut_in: str = "CutIn",
                    highway: str = HIGHWAY) -> CheckResult:
    """Flicker makes >= 30% of cut-in runs oscillate (more than highway) and at
    least doubles mean |jerk|."""
    osc_c = _rate(_metrics(records, attack, cut_in), lambda m: m.oscillatory)
    osc_h = _rate(_metrics(records, attack, highway), lambda m: m.oscillatory)
    j = _mean([m.mean_abs_jerk for m in _metrics(records, attack)])
    j0 = _mean([m.mean_abs_jerk for m in _metrics(records, baseline)])
    ok = osc_c >= 0.30 and osc_c > osc_h and j >= 2.0 * j0
    return CheckResult("flicker_effect", ok,
                       f"oscillatory {cut_in}={osc_c:.3f} (>=0.30) {highway}={osc_h:.3f} (<{cut_in}); "
                       f"mean|jerk| {j:.3f} vs {j0:.3f} ratio={j / j0:.2f} (>=2)",
                       dict(oscillatory_cut_in=osc_c, oscillatory_highway=osc_h, mean_abs_jerk=j,
                            baseline_mean_abs_jerk=j0))


def _persistence_ablation(records, attack: str = "fp", guarded: str = "fp+persistence") -> CheckResult:
    """Persistence alone removes >= 50% of FP false-EB episodes."""
    n0 = sum(m.false_eb_count for m in _metrics(records, attack))
    n1 = sum(m.false_eb_count for m in _metrics(records, guarded))
    cut = 1.0 - n1 / n0 if n0 else math.nan
    return CheckResult("persistence_ablation", n0 > 0 and cut >= 0.5,
                       f"false-EB episodes {n1} vs {n0}, cut={cut:.3f} (>=0.50)",
                       dict(episodes=n0, guarded_episodes=n1, cut=cut))


def _rate_limit_ablation(records, attack: str = "flicker", guarded: str = "flicker+rate_limit") -> CheckResult:
    """Rate limiter alone cuts flicker mean |jerk| >= 30% and oscillatory runs >= 50%."""
    a, g = _metrics(records, attack), _metrics(records, guarded)
    j0, j1 = _mean([m.mean_abs_jerk for m in a]), _mean([m.mean_abs_jerk for m in g])
    o0, o1 = _rate(a, lambda m: m.oscillatory), _rate(g, lambda m: m.oscillatory)
    jcut = 1.0 - j1 / j0
    ocut = 1.0 - o1 / o0 if o0 > 0 else math.nan
    ok = jcut >= 0.30 and o0 > 0 and ocut >= 0.50
    return CheckResult("rate_limit_ablation", ok,
                       f"mean|jerk| {j1:.3f} vs {j0:.3f} cut={jcut:.3f} (>=0.30); oscillatory {o1:.3f} vs "
                       f"{o0:.3f} cut={ocut:.3f} (>=0.50)",
                       dict(jerk=j0, guarded_jerk=j1, jerk_cut=jcut, oscillatory=o0, guarded_oscillatory=o1,
                            oscillatory_cut=ocut))


def _fallback_ablation(records, attack: str = "fn", guarded: str = "fn+fallback",
                       family: str = HIGHWAY) -> CheckResult:
    """Fallback alone cuts FN collision rate by >= 40% (relative)."""
    c0 = _rate(_metrics(records, attack, family), lambda m: m.collision)
    c1 = _rate(_metrics(records, guarded, family), lambda m: m.collision)
    cut = 1.0 - c1 / c0 if c0 > 0 else math.nan
    return CheckResult("fallback_ablation", c0 > 0 and cut >= 0.4,
                       f"{family}: collision {c1:.3f} vs {c0:.3f} cut={cut:.3f} (>=0.40)",
                       dict(collision_rate=c0, guarded_collision_rate=c1, cut=cut))


def _all_safeguards(records, suffix: str = SAFEGUARD_SUFFIX, baseline: str = "baseline") -> CheckResult:
    """Across every attacked condition X with a partner X+sg: collisions cut
    >= 50%, false-EB episodes cut >= 40%, mean travel time up <= 15%."""
    labels = {r.condition for r in records if r.ok}
    pairs = sorted(lab for lab in labels if lab != baseline and not lab.endswith(suffix)
                   and lab + suffix in labels)
    if not pairs:
        raise MissingData(f"no condition pairs X / X{suffix}")
    off = [m for lab in pairs for m in _metrics(records, lab)]
    on = [m for lab in pairs for m in _metrics(records, lab + suffix)]
    c0, c1 = sum(m.collision for m in off), sum(m.collision for m in on)
    f0, f1 = sum(m.false_eb_count for m in off), sum(m.false_eb_count for m in on)
    t0, t1 = _mean([m.travel_time for m in off]), _mean([m.travel_time for m in on])
    ccut = 1.0 - c1 / c0 if c0 else math.nan
    fcut = 1.0 - f1 / f0 if f0 else math.nan
    tinc = t1 / t0 - 1.0
    ok = c0 > 0 and ccut >= 0.5 and f0 > 0 and fcut >= 0.4 and tinc <= 0.15
    return CheckResult("all_safeguards", ok,
                       f"over {pairs}: collisions {c1} vs {c0} cut={ccut:.3f} (>=0.50); false-EB episodes "
                       f"{f1} vs {f0} cut={fcut:.3f} (>=0.40); travel time +{tinc:.3%} (<=15%)",
                       dict(conditions=pairs, collisions=c0, guarded_collisions=c1, collision_cut=ccut,
                            false_eb=f0, guarded_false_eb=f1, false_eb_cut=fcut, travel_time_increase=tinc))


CHECKS: Dict[str, Callable[..., CheckResult]] = {
    name: _guarded(name, fn) for name, fn in (
        ("baseline_safety", _baseline_safety),
        ("fn_effect", _fn_effect),
        ("fp_effect", _fp_effect),
        ("bias_delay", _bias_delay),
        ("bias_underestimate", _bias_underestimate),
        ("flicker_effect", _flicker_effect),
        ("persistence_ablation", _persistence_ablation),
        ("rate_limit_ablation", _rate_limit_ablation),
        ("fallback_ablation", _fallback_ablation),
        ("all_safeguards", _all_safeguards),
    )
}


def evaluate(names: Sequence[str], records) -> List[CheckResult]:
    out = []
    for name in names:
        if name not in CHECKS:
            out.append(CheckResult(name, False, f"unknown check; available: {sorted(CHECKS)}"))
        else:
            out.append(CHECKS[name](records))
    return out
