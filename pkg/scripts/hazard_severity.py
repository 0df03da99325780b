"""Sweep lead-hazard severity and report what the FN criteria see.

Used to calibrate ``hazard_v_final``/``hazard_decel``: harsher hazards
lengthen the FN brake delay but start producing baseline collisions.

    python scripts/hazard_severity.py --v-final 2 8 --v-final 6 14 --decel -6 -n 60
"""
import argparse
import dataclasses
from pathlib import Path

import numpy as np

from aebsim.acceptance import evaluate
from aebsim.config import load_config
from aebsim.harness import execute, plan

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
KEEP = ("baseline", "fn", "fn+fallback", "fn+sg")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--v-final", nargs=2, type=float, action="append", required=True, metavar=("LO", "HI"))
    ap.add_argument("--decel", type=float, default=-6.0, help="lead deceleration, negative m/s^2")
    ap.add_argument("-n", "--runs", type=int, default=60)
    ap.add_argument("-j", "--parallelism", type=int, default=1)
    args = ap.parse_args()
    base = load_config(CONFIGS / "hazard.yaml")
    conds = tuple(c for c in base.conditions if c.label in KEEP)
    for vf in args.v_final:
        cal = {"HighwayFollowing": {"hazard_prob": 1.0, "hazard_v_final": list(vf), "hazard_decel": args.decel}}
        cfg = dataclasses.replace(base, calibration=cal, runs_per_family=args.runs,
                                  families=("HighwayFollowing",), conditions=conds, acceptance=())
        recs = execute(plan(cfg), cfg, args.parallelism)
        b = [r.metrics for r in recs if r.condition == "baseline"]
        print(f"v_final={vf} decel={args.decel}: baseline collisions {np.mean([m.collision for m in b]):.3f}, "
              f"EB {np.mean([m.eb_event_count > 0 for m in b]):.3f}")
        for c in evaluate(["fn_effect", "fallback_ablation"], recs):
            print("  " + c.line())


if __name__ == "__main__":
    main()
