"""Command line entry point ``eol``.

Every subcommand accepts ``--config FILE --seed N --threads N --out DIR``.
A JSON config supplies defaults for the subcommand's flags; flags given on
the command line win. Exit codes: 0 success, 1 usage, 2 numerical failure,
3 verdict failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERDICT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for numerical failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="FILE", help="JSON file with defaults for this subcommand")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="worker threads (fallback: EOL_THREADS, then 1)")
    p.add_argument("--out", metavar="DIR", default=None)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    top = _Parser(prog="eol", description="Wasserstein convergence experiments for empirical measures of diffusions.")
    top.add_argument("--version", action="version", version=f"eol {__version__}")
    sub = top.add_subparsers(dest="command", metavar="<subcommand>", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", parents=[common], help="simulate Langevin trajectories")
    s.add_argument("--model", default="ou-1d")
    s.add_argument("--t", type=float, default=10.0, help="time span")
    s.add_argument("--h", type=float, default=0.01, help="step size")
    s.add_argument("--replicas", type=int, default=1)
    s.add_argument("--x0", type=float, nargs="+", default=None, help="start at a point instead of μ")

    s = sub.add_parser("distance", parents=[common], help="one distance between stored measures")
    s.add_argument("--a", required=False, help="atoms file (.csv or .npy)")
    s.add_argument("--b", default=None, help="second atoms file")
    s.add_argument("--mu", default=None, metavar="MODEL", help="compare with the invariant law of MODEL")
    s.add_argument("--cost", choices=["w2", "w1", "truncated"], default="w2")
    s.add_argument("--solver", choices=["auto", "lp", "sinkhorn", "quantile", "exact_1d", "flow", "circle"], default="auto")
    s.add_argument("--m", type=int, default=2048, help="μ-discretization size")
    s.add_argument("--max-atoms", type=int, default=4096)

    s = sub.add_parser("bounds", parents=[common], help="spectral upper bounds for stored densities")
    s.add_argument("--density", required=False, help="JSON file with coefficients on the 1-D OU basis")
    s.add_argument("--p", type=float, default=2.0)

    s = sub.add_parser("rates", parents=[common], help="γ, β, α, γ̃, β̃ and exponent predictions")
    s.add_argument("--model", default="ou-1d")
    s.add_argument("--sum", type=float, default=None, metavar="C", help="Σ C/λ_i² with certified error")
    s.add_argument("--gamma", type=float, default=None, metavar="T")
    s.add_argument("--beta", type=float, default=None, metavar="EPS")
    s.add_argument("--alpha", type=float, default=None, metavar="EPS")
    s.add_argument("--gamma-tilde", type=float, default=None, metavar="T")
    s.add_argument("--beta-tilde", type=float, default=None, metavar="EPS")
    s.add_argument("--upper", type=float, default=None, metavar="T", help="inf_ε α(ε) + β(ε)/t")
    s.add_argument("--predict", action="store_true", help="predicted decay exponents")

    s = sub.add_parser("appendix-check", parents=[common], help="randomized density-bound domination suite")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--p", type=float, default=2.0)
    s.add_argument("--atoms", type=int, default=512)

    s = sub.add_parser("report", parents=[common], help="render table.csv files as log-log SVG plots")
    s.add_argument("--input", nargs="*", default=[], help="table.csv files or result directories")

    s = sub.add_parser("run", parents=[common], help="run a full experiment from a config or preset")
    s.add_argument("--preset", default=None)
    s.add_argument("--R", type=int, default=None, help="override the replica count")
    return top


def _config_defaults(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse twice: file values become defaults, explicit flags override them."""
    args = parser.parse_args(argv)
    if args.config and args.command != "run":
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _provenance(args: argparse.Namespace) -> tuple[dict, str]:
    d = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "threads", "config")}
    text = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return d, hashlib.sha256(text.encode()).hexdigest()[:16]


def _emit(payload: dict, args, name: str) -> None:
    print(json.dumps(payload, indent=2, default=float))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, name), "w") as fh:
            json.dump(payload, fh, indent=2, default=float)


def _load_atoms(path: str):
    from .simulate import EmpiricalMeasure

    if path.endswith(".npy"):
        x = np.load(path)
        return EmpiricalMeasure.uniform(x)
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    rows = list(csv.reader(lines))
    header = rows[0]
    try:
        [float(v) for v in header]
        data = np.array(rows, float)
        cols = [f"c{i}" for i in range(data.shape[1])]
    except ValueError:
        data = np.array(rows[1:], float)
        cols = header
    keep = [i for i, c in enumerate(cols) if c not in ("t", "w", "weight")]
    atoms = data[:, keep]
    if "w" in cols or "weight" in cols:
        wi = cols.index("w") if "w" in cols else cols.index("weight")
        return EmpiricalMeasure(atoms, data[:, wi] / data[:, wi].sum())
    return EmpiricalMeasure.uniform(atoms)


# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .models import dirac, model_from_id, stationary
    from .simulate import Trajectory, simulate_ensemble

    model = model_from_id(args.model)
    seed = 0 if args.seed is None else args.seed
    init = stationary() if args.x0 is None else dirac(args.x0)
    states = simulate_ensemble(model, init, args.t, args.h, seed, list(range(args.replicas)))
    args.seed = seed
    prov, h = _provenance(args)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    paths = []
    for r in range(args.replicas):
        traj = Trajectory(args.h, states[r], model.name, seed, r)
        path = os.path.join(out, f"trajectory_{r:04d}.csv")
        traj.to_csv(path, header=[f"config_hash={h}", f"seed={seed}", f"replica={r}"])
        paths.append(path)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump({**prov, "config_hash": h}, fh, indent=2)
    print(f"wrote {len(paths)} trajectories to {out} (config {h}, seed {seed})")
    return EXIT_OK


def cmd_distance(args) -> int:
    from .models import model_from_id
    from .transport import (
        W1,
        W1_TRUNC,
        W2,
        distance_to_mu,
        quantile_grid,
        sinkhorn,
        w2_circle_uniform,
        w2_discrete_1d,
        w2_exact_1d,
        w_tilde1_1d,
        wp_discrete,
    )

    if not args.a:
        raise UsageError("distance needs --a")
    if (args.b is None) == (args.mu is None):
        raise UsageError("give exactly one of --b and --mu")
    cost = {"w2": W2, "w1": W1, "truncated": W1_TRUNC}[args.cost]
    a = _load_atoms(args.a)
    seed = 0 if args.seed is None else args.seed
    solver = args.solver
    if args.mu is not None:
        model = model_from_id(args.mu)
        if a.d != model.d:
            raise UsageError(f"atoms have dimension {a.d}, model {model.name} has {model.d}")
        if solver == "auto":
            if args.cost == "w2" and model.d == 1:
                solver = "circle" if model.domain.kind == "torus" else "exact_1d"
            elif args.cost == "truncated" and model.d == 1 and model.domain.kind == "free":
                solver = "flow"
            else:
                solver = "lp"
        if solver == "exact_1d":
            value = w2_exact_1d(a, model)
        elif solver == "circle":
            value = w2_circle_uniform(a, model.domain.period)
        elif solver == "flow" and model.domain.kind == "free":
            value = w_tilde1_1d(a, quantile_grid(model, args.m))
        else:
            value = distance_to_mu(a, model, cost, m=args.m, seed=seed, solver=solver, max_atoms=args.max_atoms).estimate
    else:
        b = _load_atoms(args.b)
        if solver in ("auto", "lp"):
            solver = "lp"
            value = wp_discrete(a, b, cost).value
        elif solver == "sinkhorn":
            value = sinkhorn(a, b, cost).value
        elif solver == "quantile":
            value = w2_discrete_1d(a, b)
        elif solver == "flow":
            value = w_tilde1_1d(a, b)
        else:
            raise UsageError(f"solver {solver!r} needs --mu")
    args.seed = seed
    prov, h = _provenance(args)
    _emit({"distance": value, "cost": args.cost, "solver": solver, "config_hash": h, "seed": seed, "inputs": prov}, args, "distance.json")
    return EXIT_OK


def cmd_bounds(args) -> int:
    """Density file keys: ``coeffs`` (f - 1 on the 1-D OU basis) for the
    Ledoux bound; ``f1``/``f2`` (coefficients of f - 1) for the three
    W_p bounds; ``xi`` and ``eps`` for the spectral bound of the smoothed
    empirical density."""
    from .models import eigen_pairs, model_from_id
    from .simulate import ModifiedDensity
    from .transport import DensityPair, ledoux_bound, spectral_w2_bound, wp_density_bounds

    if not args.density:
        raise UsageError("bounds needs --density FILE")
    with open(args.density) as fh:
        spec = json.load(fh)
    model = model_from_id(spec.get("model", "ou-1d"))
    out = {}
    if "coeffs" in spec:
        a = np.asarray(spec["coeffs"], float)
        basis = eigen_pairs(model, a.size)
        out["ledoux"] = ledoux_bound(a, basis)
    if "f1" in spec and "f2" in spec:
        a1, a2 = np.asarray(spec["f1"], float), np.asarray(spec["f2"], float)
        n = max(a1.size, a2.size)
        a1, a2 = np.pad(a1, (0, n - a1.size)), np.pad(a2, (0, n - a2.size))
        basis = eigen_pairs(model, n)

        def dens(c):
            return lambda x: 1.0 + basis(x) @ c

        pair = DensityPair(basis, dens(a1), dens(a2), a2 - a1)
        pair.check(1e-6)
        out["wp_bounds"] = wp_density_bounds(pair, args.p).to_record()
        out["p"] = args.p
    if "xi" in spec:
        xi = np.asarray(spec["xi"], float)
        basis = eigen_pairs(model, xi.size)
        out["spectral_w2"] = spectral_w2_bound(ModifiedDensity(basis, xi, float(spec.get("eps", 0.1))))
    if not out:
        raise UsageError("density file has none of coeffs, f1/f2, xi")
    prov, h = _provenance(args)
    out.update(config_hash=h, seed=args.seed)
    _emit(out, args, "bounds.json")
    return EXIT_OK


def cmd_rates(args) -> int:
    from .models import eigen_pairs, model_from_id
    from .rates import (
        alpha_fn,
        beta_fn,
        beta_tilde,
        compact_exponent_prediction,
        gamma_spectral,
        gamma_tilde,
        rate_exponent_prediction,
        spectral_sum,
        upper_bound_opt,
    )

    model = model_from_id(args.model)
    seed = 0 if args.seed is None else args.seed
    did = False
    if args.sum is not None:
        s = spectral_sum(model, args.sum)
        tag = "certified" if s.certified else "uncertified"
        print(f"sum {args.sum:g}/lambda^2 = {s.value:.5f} +/- {s.error:.1e} ({tag})")
        did = True
    basis = None
    if any(v is not None for v in (args.gamma, args.beta, args.upper)):
        from .models import default_truncation

        basis = eigen_pairs(model, default_truncation(model, 0.01))
    if args.gamma is not None:
        print(f"gamma({args.gamma:g}) = {gamma_spectral(basis, args.gamma).value:.10g}")
        did = True
    if args.beta is not None:
        print(f"beta({args.beta:g}) = {beta_fn(basis, args.beta):.10g}")
        did = True
    if args.alpha is not None:
        a = alpha_fn(model, args.alpha, seed=seed)
        print(f"alpha({args.alpha:g}) = {a.value:.10g} +/- {a.stderr:.2g}")
        did = True
    if args.gamma_tilde is not None:
        g = gamma_tilde(model, args.gamma_tilde, seed=seed)
        print(f"gamma_tilde({args.gamma_tilde:g}) = {g.value:.10g} +/- {g.stderr:.2g}")
        did = True
    if args.beta_tilde is not None:
        print(f"beta_tilde({args.beta_tilde:g}) = {beta_tilde(lambda t: gamma_tilde(model, t, seed=seed).value, args.beta_tilde):.10g}")
        did = True
    if args.upper is not None:
        opt = upper_bound_opt(lambda e: alpha_fn(model, e, seed=seed).value, lambda e: beta_fn(basis, e), args.upper)
        print(f"inf_eps alpha + beta/t at t={args.upper:g}: {opt.value:.10g} (eps = {opt.eps:.4g})")
        did = True
    if args.predict:
        if model.family == "torus":
            pred = compact_exponent_prediction(model.d)
        else:
            pred = rate_exponent_prediction(model.d, model.params.get("p", 2.0))
        log = " * log t" if pred.log_factor else ""
        print(f"upper: t^-{pred.upper:.6g}{log}; lower: t^-{pred.lower:.6g}")
        did = True
    if not did:
        raise UsageError("rates: nothing requested (try --sum 2 or --predict)")
    return EXIT_OK


def cmd_appendix_check(args) -> int:
    from .experiment import domination_suite

    seed = 0 if args.seed is None else args.seed
    res = domination_suite(args.n, args.p, seed=seed, n_atoms=args.atoms)
    print(res.summary())
    if args.out:
        args.seed = seed
        prov, h = _provenance(args)
        _emit({"config_hash": h, "seed": seed, "p": args.p, "violations": res.violations, "n": res.n, "worst_ratio": res.worst_ratio, "records": res.records}, args, "appendix_check.json")
    return EXIT_OK if res.passed else EXIT_VERDICT


def cmd_report(args) -> int:
    from .experiment import read_table
    from .plotting import plot_table

    tables = []
    for item in args.input:
        if os.path.isdir(item):
            tables += sorted(glob.glob(os.path.join(item, "**", "table.csv"), recursive=True))
        else:
            tables.append(item)
    if not tables:
        print("report: no result tables found", file=sys.stderr)
        return EXIT_USAGE
    made = 0
    for path in tables:
        rows = read_table(path)
        if not rows:
            print(f"report: {path} has no rows", file=sys.stderr)
            continue
        meta, rate = _table_meta(path)
        target = os.path.join(args.out, f"{meta.get('config_hash', 'table')}.svg") if args.out else os.path.join(os.path.dirname(path) or ".", "plot.svg")
        if args.out:
            os.makedirs(args.out, exist_ok=True)
        plot_table(rows, target, rate, meta.get("config_hash", ""), meta.get("seed"))
        print(f"wrote {target}")
        made += 1
    if made == 0:
        print("report: empty result set", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def _table_meta(path: str):
    meta = {}
    with open(path) as fh:
        for ln in fh:
            if not ln.startswith("#"):
                break
            k, _, v = ln[1:].strip().partition("=")
            meta[k.strip()] = v.strip()
    rate = None
    res = os.path.join(os.path.dirname(path), "results.json")
    if os.path.exists(res):
        with open(res) as fh:
            rate = json.load(fh).get("rate")
    return meta, rate


def cmd_run(args) -> int:
    from .experiment import ExperimentConfig, preset, run_experiment

    if (args.preset is None) == (args.config is None):
        raise UsageError("run needs exactly one of --preset and --config")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.R is not None:
        overrides["R"] = args.R
    if args.preset:
        try:
            cfg = preset(args.preset, **overrides)
        except KeyError as exc:
            raise UsageError(str(exc.args[0]))
    else:
        try:
            with open(args.config) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        d.update(overrides)
        cfg = ExperimentConfig.from_dict(d)
    out = args.out or cfg.out or os.path.join("results", cfg.hash)
    rec = run_experiment(cfg, out=out, threads=args.threads)
    for r in rec.rows:
        print(f"t={r['t']:g}  {r['statistic']}: {r['mean']:.6g} +/- {r['stderr']:.2g}  (R={r['R']})")
    if rec.rate:
        print(f"slope {rec.rate['slope']:.4f}  CI [{rec.rate['ci95'][0]:.4f}, {rec.rate['ci95'][1]:.4f}]")
    for k, v in rec.verdicts.items():
        print(f"{k}: {'PASS' if v else 'FAIL'}")
    print(f"config {rec.config_hash}, outputs in {out}")
    if not rec.complete:
        print("interrupted: partial outputs flagged incomplete", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK if rec.passed else EXIT_VERDICT


COMMANDS = {
    "simulate": cmd_simulate,
    "distance": cmd_distance,
    "bounds": cmd_bounds,
    "rates": cmd_rates,
    "appendix-check": cmd_appendix_check,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .experiment import StageFailure
    from .models import NoClosedFormSpectrum, SamplerFailure
    from .rates import DivergentIntegral, NonSummableSpectrum
    from .simulate import NumericalBlowup, ReplicaFailure
    from .transport import InfeasibleMarginals, SolverFailure

    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _config_defaults(parser, argv)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"eol: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalBlowup, ReplicaFailure, SolverFailure, SamplerFailure, DivergentIntegral, NonSummableSpectrum, NoClosedFormSpectrum, InfeasibleMarginals, FloatingPointError) as exc:
        print(f"eol: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StageFailure as exc:
        print(f"eol: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"eol: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
