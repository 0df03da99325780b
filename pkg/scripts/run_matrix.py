"""Run the default and hazard matrices and print every acceptance line.

    python scripts/run_matrix.py --out runs -j 4

Equivalent to two ``aebsim run`` calls; kept as a script so the full
evaluation is one command with timings.
"""
import argparse
import sys
import time
from pathlib import Path

from aebsim.config import load_config
from aebsim.harness import run_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("-j", "--parallelism", type=int, default=1)
    ap.add_argument("--configs", nargs="+", default=["default", "hazard"])
    args = ap.parse_args()
    ok = True
    for name in args.configs:
        cfg = load_config(CONFIGS / f"{name}.yaml")
        t0 = time.time()
        res = run_experiment(cfg, Path(args.out) / name, parallelism=args.parallelism)
        print(f"== {name}: {len(res.records)} runs in {time.time() - t0:.0f}s")
        for c in res.acceptance:
            print(c.line())
            ok &= c.passed
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
