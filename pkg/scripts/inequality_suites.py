"""Randomized checks of the density-pair transport bounds and the Ledoux inequality.

Writes results/suites.json with per-case records.
"""

import argparse
import json
import os

from eol.experiment import domination_suite, ledoux_suite

ap = argparse.ArgumentParser()
ap.add_argument("--n", type=int, default=200)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--atoms", type=int, default=512)
ap.add_argument("--out", default="results")
args = ap.parse_args()

suites = [domination_suite(args.n, p, seed=args.seed, n_atoms=args.atoms) for p in (1.5, 2.0, 3.0)]
suites.append(ledoux_suite(args.n, seed=args.seed))
for s in suites:
    print(f"{s.name:18s} {s.summary():22s} worst ratio {s.worst_ratio:.4f}")

os.makedirs(args.out, exist_ok=True)
with open(os.path.join(args.out, "suites.json"), "w") as fh:
    json.dump({s.name: {"violations": s.violations, "n": s.n, "worst_ratio": s.worst_ratio, "records": s.records} for s in suites}, fh, indent=1)
