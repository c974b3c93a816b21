"""Config-driven experiments: simulate, measure distances, fit rates, write outputs.

An experiment is fully determined by its canonical config (everything except
the output directory and thread count). Replicas are processed in fixed
chunks so that outputs are bit-identical for any number of worker threads.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import __version__
from .models import DiffusionModel, InitialDistribution, dirac, eigen_pairs, model_from_id, stationary
from .rates import compact_exponent_prediction, fit_rate, rate_exponent_prediction, spectral_sum, xi_variance_exact
from .rng import MU_SAMPLE
from .simulate import (
    EmpiricalMeasure,
    default_burn_in,
    resolve_threads,
    run_replicas,
    simulate_ensemble,
    trapezoid_average,
    window_states,
)
from .transport import (
    W1_TRUNC,
    CostSpec,
    distance_to_mu,
    quantile_grid,
    w2_circle_uniform,
    w2_exact_1d,
    w_tilde1_1d,
)

CHUNK = 32


class StageFailure(RuntimeError):
    def __init__(self, stage: str, replica: Optional[int], cause: BaseException):
        self.stage = stage
        self.replica = replica
        self.cause = cause
        where = "" if replica is None else f", replica {replica}"
        super().__init__(f"stage {stage!r} failed{where}: {cause}")


@dataclass
class DistanceSpec:
    solver: str = "auto"  # auto | exact_1d | circle | lp | sinkhorn | flow
    cost: str = "w2"  # w2 | w1 | truncated
    power: float = 2.0  # statistic is distance ** power
    m: int = 2048  # μ-discretization size
    n_atoms: int = 2048  # the empirical measure is thinned to this many atoms for LP/Sinkhorn


@dataclass
class ExperimentConfig:
    model: str = "ou-1d"
    kind: str = "rate"  # rate | xi_variance
    init: dict = field(default_factory=lambda: {"kind": "stationary"})
    horizons: list = field(default_factory=lambda: [25.0, 50.0, 100.0, 200.0])
    h: float = 0.01
    burn_in: Optional[float] = None
    R: int = 200
    seed: int = 0
    distance: DistanceSpec = field(default_factory=DistanceSpec)
    bounds: list = field(default_factory=list)  # "bracket", "upper_opt"
    prediction: Optional[dict] = None  # {"slope", "tol", "log_factor", "side"}; derived if absent
    modes: list = field(default_factory=lambda: [1, 2, 3])  # for xi_variance
    bracket_tol: float = 0.2
    out: Optional[str] = None
    threads: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.distance, dict):
            self.distance = DistanceSpec(**self.distance)
        self.horizons = [float(t) for t in self.horizons]
        self.validate()

    def validate(self) -> None:
        if any(b <= a for a, b in zip(self.horizons, self.horizons[1:])):
            raise ValueError("horizons must be strictly increasing")
        if not self.horizons:
            raise ValueError("at least one horizon is required")
        if self.R < 2:
            raise ValueError("R must be at least 2")
        if not self.h > 0:
            raise ValueError("h must be positive")
        if self.kind not in ("rate", "xi_variance"):
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        model_from_id(self.model)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical(self) -> str:
        d = self.to_dict()
        d.pop("out", None)
        d.pop("threads", None)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def config_hash(d: dict) -> str:
    return ExperimentConfig.from_dict(dict(d)).hash


PRESETS = {
    "ou1d-bracket": dict(
        model="ou-1d",
        horizons=[25, 50, 100, 200],
        R=200,
        distance=dict(solver="exact_1d"),
        bounds=["bracket", "upper_opt"],
        prediction=dict(slope=-1.0, tol=0.12),
    ),
    "torus1d-rate": dict(
        model="torus-1d",
        horizons=[25, 50, 100, 200],
        R=200,
        distance=dict(solver="circle"),
        bounds=["bracket"],
        prediction=dict(slope=-1.0, tol=0.12),
    ),
    "torus3d-rate": dict(
        model="torus-3d",
        horizons=[25, 50, 100, 200],
        R=20,
        distance=dict(solver="lp", m=2048, n_atoms=2048),
        prediction=dict(slope=-1.0, tol=0.2),
    ),
    "torus5d-rate": dict(
        model="torus-5d",
        horizons=[25, 50, 100, 200],
        R=50,
        distance=dict(solver="lp", m=2048, n_atoms=2048),
        prediction=dict(slope=-2.0 / 3.0, tol=0.2),
    ),
    "ou1d-lower": dict(
        model="ou-1d",
        horizons=[50, 100, 200],
        R=100,
        distance=dict(solver="flow", cost="truncated", m=4096),
        prediction=dict(slope=-1.0, tol=0.2),
    ),
    "torus5d-lower": dict(
        model="torus-5d",
        horizons=[25, 50, 100, 200],
        R=50,
        distance=dict(solver="lp", cost="truncated", power=1.0, m=2048, n_atoms=2048),
        prediction=dict(slope=-1.0 / 3.0, tol=0.1, side="lower"),
    ),
    "xi-variance": dict(
        model="ou-1d",
        kind="xi_variance",
        horizons=[10],
        R=1000,
        modes=[1, 2, 3],
    ),
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    d = json.loads(json.dumps(PRESETS[name]))
    d.update(overrides)
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------


def _init_of(cfg: ExperimentConfig) -> InitialDistribution:
    kind = cfg.init.get("kind", "stationary")
    if kind == "stationary":
        return stationary()
    if kind == "dirac":
        return dirac(cfg.init["x0"])
    raise ValueError(f"unsupported init kind {kind!r} in config")


def _cost_of(spec: DistanceSpec) -> CostSpec:
    if spec.cost == "w2":
        return CostSpec("rho_power", 2.0)
    if spec.cost == "w1":
        return CostSpec("rho_power", 1.0)
    if spec.cost == "truncated":
        return W1_TRUNC
    raise ValueError(f"unknown cost {spec.cost!r}")


def _solver_of(spec: DistanceSpec, model: DiffusionModel) -> str:
    if spec.solver != "auto":
        return spec.solver
    if spec.cost == "truncated":
        return "flow" if model.d == 1 and model.domain.kind == "free" else "lp"
    if spec.cost == "w2" and model.d == 1:
        return "circle" if model.domain.kind == "torus" else "exact_1d"
    return "lp"


def _mu_seed(seed: int, replica: int, j: int) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(MU_SAMPLE, int(replica), int(j)))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def replica_distance(atoms: np.ndarray, model: DiffusionModel, spec: DistanceSpec, seed: int, replica: int, j: int, grid=None) -> float:
    """Distance between one replica's empirical measure and μ."""
    emp = EmpiricalMeasure.uniform(atoms)
    solver = _solver_of(spec, model)
    if solver == "exact_1d":
        return w2_exact_1d(emp, model)
    if solver == "circle":
        return w2_circle_uniform(emp, model.domain.period)
    if solver == "flow":
        return w_tilde1_1d(emp, grid if grid is not None else quantile_grid(model, spec.m))
    est = distance_to_mu(
        emp, model, _cost_of(spec), m=spec.m, seed=_mu_seed(seed, replica, j), solver=solver, max_atoms=spec.n_atoms
    )
    return est.estimate


@dataclass
class ResultRecord:
    config: dict
    config_hash: str
    seed: int
    rows: list  # dicts: t, statistic, mean, stderr, R
    per_replica: dict
    rate: Optional[dict]
    bounds: dict
    verdicts: dict
    version: str = __version__
    wall_clock: float = 0.0
    complete: bool = True

    @property
    def passed(self) -> bool:
        return all(v for v in self.verdicts.values() if v is not None)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "rows": self.rows,
            "rate": self.rate,
            "bounds": self.bounds,
            "verdicts": self.verdicts,
            "software_version": self.version,
            "wall_clock_s": self.wall_clock,
            "complete": self.complete,
        }


def table_csv(record: ResultRecord) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={record.config_hash}\n")
    buf.write(f"# seed={record.seed}\n")
    if not record.complete:
        buf.write("# incomplete=true\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "statistic", "mean", "stderr", "R"])
    for r in record.rows:
        w.writerow([repr(float(r["t"])), r["statistic"], repr(float(r["mean"])), repr(float(r["stderr"])), int(r["R"])])
    return buf.getvalue()


def read_table(path) -> list:
    rows = []
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for r in csv.DictReader(lines):
        rows.append({"t": float(r["t"]), "statistic": r["statistic"], "mean": float(r["mean"]), "stderr": float(r["stderr"]), "R": int(r["R"])})
    return rows


def write_outputs(record: ResultRecord, out: str, plot: bool = True) -> None:
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump({**record.config, "config_hash": record.config_hash}, fh, indent=2, sort_keys=True)
    with open(os.path.join(out, "results.json"), "w") as fh:
        json.dump(record.to_json(), fh, indent=2)
    with open(os.path.join(out, "table.csv"), "w") as fh:
        fh.write(table_csv(record))
    if plot and record.rows:
        from .plotting import plot_table

        plot_table(record.rows, os.path.join(out, "plot.svg"), record.rate, record.config_hash, record.seed)


def _stats(values: np.ndarray):
    R = values.shape[0]
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(R)) if R > 1 else float("nan")


def _chunks(R: int):
    return [list(range(s, min(s + CHUNK, R))) for s in range(0, R, CHUNK)]


def _predicted(cfg: ExperimentConfig, model: DiffusionModel) -> dict:
    if cfg.prediction is not None:
        side = cfg.prediction.get("side", "two")
        if side not in ("two", "lower"):
            raise ValueError(f"prediction side must be 'two' or 'lower', got {side!r}")
        return {"slope": cfg.prediction.get("slope"), "tol": cfg.prediction.get("tol", 0.0), "log_factor": cfg.prediction.get("log_factor", False), "side": side}
    if model.family == "torus":
        pred = compact_exponent_prediction(model.d)
    elif model.family == "ou":
        pred = rate_exponent_prediction(model.d, 2.0)
    else:
        pred = rate_exponent_prediction(model.d, model.params["p"])
    return {"slope": -pred.upper, "tol": 0.2, "log_factor": pred.log_factor, "side": "two"}


def run_experiment(cfg: ExperimentConfig, out: Optional[str] = None, threads: Optional[int] = None, write: bool = True) -> ResultRecord:
    """Run the pipeline; outputs go to ``out`` (or cfg.out) when given."""
    out = out or cfg.out
    threads = resolve_threads(threads if threads is not None else cfg.threads)
    start = time.perf_counter()
    if cfg.kind == "xi_variance":
        record = _run_xi(cfg, threads)
    else:
        record = _run_rate(cfg, threads)
    record.wall_clock = time.perf_counter() - start
    if out and write:
        write_outputs(record, out)
    return record


def _collect(cfg, threads, worker, n_cols):
    """Run ``worker`` over fixed replica chunks; returns (values, complete)."""
    chunks = _chunks(cfg.R)
    done = []
    complete = True
    try:
        if threads == 1:
            for ch in chunks:
                done.append(worker(ch))
        else:
            done = run_replicas(worker, chunks, threads)
    except KeyboardInterrupt:
        complete = False
    if done:
        values = np.concatenate(done, axis=0)
    else:
        values = np.empty((0, n_cols))
    return values, complete


def _run_rate(cfg: ExperimentConfig, threads: int) -> ResultRecord:
    model = model_from_id(cfg.model)
    init = _init_of(cfg)
    burn = default_burn_in(model, init) if cfg.burn_in is None else cfg.burn_in
    spec = cfg.distance
    t_end = burn + cfg.horizons[-1]
    solver = _solver_of(spec, model)
    grid = quantile_grid(model, spec.m) if solver == "flow" else None

    def worker(chunk):
        try:
            states = simulate_ensemble(model, init, t_end, cfg.h, cfg.seed, chunk)
        except Exception as exc:
            raise StageFailure("simulate", chunk[0], exc) from exc
        out = np.empty((len(chunk), len(cfg.horizons)))
        for i, r in enumerate(chunk):
            for j, t in enumerate(cfg.horizons):
                atoms = window_states(states[i], cfg.h, t, burn)
                try:
                    dist = replica_distance(atoms, model, spec, cfg.seed, r, j, grid)
                except Exception as exc:
                    raise StageFailure("distance", r, exc) from exc
                out[i, j] = dist**spec.power
        return out

    values, complete = _collect(cfg, threads, worker, len(cfg.horizons))
    statname = {"w2": "W2", "w1": "W1", "truncated": "W1trunc"}[spec.cost]
    statname = f"{statname}^{spec.power:g}"
    rows = []
    R = values.shape[0]
    means, ses = [], []
    for j, t in enumerate(cfg.horizons):
        if R >= 2:
            m, s = _stats(values[:, j])
        else:
            m, s = float("nan"), float("nan")
        means.append(m)
        ses.append(s)
        rows.append({"t": t, "statistic": statname, "mean": m, "stderr": s, "R": R})
    pred = _predicted(cfg, model)
    rate = None
    verdicts: dict = {}
    if R >= 2 and len(cfg.horizons) >= 3:
        rep = fit_rate(cfg.horizons, means, ses, predicted=pred["slope"], log_factor=pred["log_factor"], tol=pred["tol"])
        rate = rep.to_record()
        if pred["slope"] is not None:
            if pred["side"] == "lower":
                # lower-bound surrogate: decay no faster than the predicted rate
                verdicts["slope"] = bool(rep.slope >= pred["slope"] - pred["tol"])
            else:
                verdicts["slope"] = bool(abs(rep.slope - pred["slope"]) <= pred["tol"])
    bounds = {}
    if "bracket" in cfg.bounds and R >= 2:
        low = spectral_sum(model, 2.0).value
        high = spectral_sum(model, 8.0).value
        tv = cfg.horizons[-1] * means[-1]
        lo, hi = low * (1 - cfg.bracket_tol), high * (1 + cfg.bracket_tol)
        bounds["bracket"] = {"t": cfg.horizons[-1], "t_times_mean": tv, "sum_2_over_lambda2": low, "sum_8_over_lambda2": high, "interval": [lo, hi]}
        verdicts["bracket"] = bool(lo <= tv <= hi)
    if "upper_opt" in cfg.bounds and R >= 2 and model.family == "ou" and model.d == 1:
        from .rates import alpha_fn, beta_fn, upper_bound_opt

        basis = eigen_pairs(model, 1)
        vals = [upper_bound_opt(lambda e: alpha_fn(model, e).value, lambda e: beta_fn(basis, e), t).value for t in cfg.horizons]
        ratio = np.array(means) / np.array(vals)
        trend = float(np.polyfit(np.log(cfg.horizons), np.log(ratio), 1)[0])
        bounds["upper_opt"] = {"values": vals, "ratio": ratio.tolist(), "log_ratio_slope": trend}
        verdicts["upper_opt_no_trend"] = bool(abs(trend) <= 0.1)
    return ResultRecord(
        config=cfg.to_dict(),
        config_hash=cfg.hash,
        seed=cfg.seed,
        rows=rows,
        per_replica={"values": values.tolist()},
        rate=rate,
        bounds=bounds,
        verdicts=verdicts,
        complete=complete,
    )


def _run_xi(cfg: ExperimentConfig, threads: int) -> ResultRecord:
    model = model_from_id(cfg.model)
    init = _init_of(cfg)
    burn = default_burn_in(model, init) if cfg.burn_in is None else cfg.burn_in
    n_modes = max(cfg.modes)
    basis = eigen_pairs(model, n_modes)
    t = cfg.horizons[-1]
    idx = [m - 1 for m in cfg.modes]

    def worker(chunk):
        states = simulate_ensemble(model, init, burn + t, cfg.h, cfg.seed, chunk)
        j0 = int(round(burn / cfg.h))
        n = int(round(t / cfg.h))
        phi = basis(states[:, j0 : j0 + n + 1])
        xi = trapezoid_average(phi, cfg.h, t)
        return xi[:, idx]

    values, complete = _collect(cfg, threads, worker, len(idx))
    R = values.shape[0]
    rows = []
    verdicts = {}
    bounds = {}
    for k, mode in enumerate(cfg.modes):
        lam = float(basis.eigenvalues[mode - 1])
        sq = values[:, k] ** 2
        m, s = _stats(sq) if R >= 2 else (float("nan"), float("nan"))
        exact = xi_variance_exact(lam, t)
        rows.append({"t": t, "statistic": f"xi{mode}^2", "mean": m, "stderr": s, "R": R})
        bounds[f"xi{mode}"] = {"lambda": lam, "exact_variance": exact, "mc": m, "stderr": s, "z": (m - exact) / s if s > 0 else None}
        verdicts[f"xi{mode}_within_4se"] = bool(abs(m - exact) <= 4 * s) if R >= 2 else None
    return ResultRecord(
        config=cfg.to_dict(),
        config_hash=cfg.hash,
        seed=cfg.seed,
        rows=rows,
        per_replica={"values": values.tolist()},
        rate=None,
        bounds=bounds,
        verdicts=verdicts,
        complete=complete,
    )


# ---------------------------------------------------------------------------
# randomized inequality suites


@dataclass
class SuiteResult:
    name: str
    n: int
    violations: int
    worst_ratio: float  # max of lhs / rhs
    records: list

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def summary(self) -> str:
        return f"{self.violations} violations / {self.n}"


def domination_suite(n: int = 200, p: float = 2.0, seed: int = 0, n_atoms: int = 512, K: int = 3, floor: float = 0.05, slack: float = 1e-9) -> SuiteResult:
    """W_p(f1 μ, f2 μ)^p ≤ min of the three density bounds, on random 1-D OU pairs.

    The left side is the exact LP between quantile-midpoint discretizations
    with ``n_atoms`` atoms each.
    """
    from .rng import AUX, make_rng
    from .transport import CostSpec, quantile_discretize, random_density_pair, wp_density_bounds, wp_discrete

    model = model_from_id("ou-1d")
    basis = eigen_pairs(model, 2 * K + 2)
    cost = CostSpec("rho_power", float(p))
    records, bad, worst = [], 0, -math.inf
    for i in range(n):
        pair = random_density_pair(basis, make_rng(seed, AUX, 100, i), K=K, floor=floor)
        bd = wp_density_bounds(pair, p)
        a = quantile_discretize(pair.f1, model, n_atoms)
        b = quantile_discretize(pair.f2, model, n_atoms)
        lhs = wp_discrete(a, b, cost).value ** p
        ok = lhs <= bd.min + slack
        bad += not ok
        worst = max(worst, lhs / bd.min)
        records.append({"i": i, "wp_p": lhs, **bd.to_record(), "ok": bool(ok)})
    return SuiteResult(f"domination p={p:g}", n, bad, worst, records)


def ledoux_suite(n: int = 200, seed: int = 0, K: int = 3) -> SuiteResult:
    """W2(f μ, μ)² ≤ 4 Σ a_i²/λ_i for random nonnegative densities f = 1 + Σ a_i φ_i on 1-D OU."""
    from .rng import AUX, make_rng
    from .transport import ledoux_bound, random_density

    model = model_from_id("ou-1d")
    basis = eigen_pairs(model, 2 * K + 2)
    records, bad, worst = [], 0, -math.inf
    for i in range(n):
        f, a = random_density(basis, K, 0.0, make_rng(seed, AUX, 200, i))
        lhs = w2_exact_1d(f, model) ** 2
        rhs = ledoux_bound(a, basis)
        ok = lhs <= rhs
        bad += not ok
        worst = max(worst, lhs / rhs)
        records.append({"i": i, "w2_sq": lhs, "bound": rhs, "ok": bool(ok)})
    return SuiteResult("ledoux", n, bad, worst, records)
