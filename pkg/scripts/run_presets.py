"""Run presets into results/<name>/ and print one summary line each.

    python3 scripts/run_presets.py                      # all presets
    python3 scripts/run_presets.py ou1d-bracket --threads 4
"""

import argparse
import os

from eol.experiment import PRESETS, preset, run_experiment

ap = argparse.ArgumentParser()
ap.add_argument("names", nargs="*", default=sorted(PRESETS))
ap.add_argument("--out", default="results")
ap.add_argument("--threads", type=int, default=None)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--R", type=int, default=None)
args = ap.parse_args()

for name in args.names:
    over = {"seed": args.seed}
    if args.R:
        over["R"] = args.R
    cfg = preset(name, **over)
    rec = run_experiment(cfg, out=os.path.join(args.out, name), threads=args.threads)
    slope = f"slope {rec.rate['slope']:+.3f}" if rec.rate else "no fit"
    verdicts = " ".join(f"{k}={'PASS' if v else 'FAIL'}" for k, v in rec.verdicts.items())
    print(f"{name:15s} {slope:14s} {verdicts}  [{rec.wall_clock:.0f}s, {rec.config_hash}]")
