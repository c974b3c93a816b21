"""Euler-Maruyama paths, empirical measures and seeded Monte-Carlo ensembles.

Each replica draws its noise from its own counter-based stream keyed by
``(seed, PATH, replica)``, so a replica is a pure function of its index and
the results never depend on how replicas are batched or scheduled.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .models import DiffusionModel, InitialDistribution, SpectralBasis, stationary
from .rng import PATH, make_rng

# noise is drawn in blocks of this many steps; any block size gives the same
# stream, this only bounds memory
_BLOCK = 4096


class NumericalBlowup(FloatingPointError):
    def __init__(self, step: int, norm: float, replica: Optional[int] = None):
        self.step = step
        self.norm = norm
        self.replica = replica
        where = "" if replica is None else f" (replica {replica})"
        super().__init__(f"non-finite state at step {step}{where}, |x| = {norm}")


class ReplicaFailure(RuntimeError):
    def __init__(self, replica: int, cause: BaseException):
        self.replica = replica
        self.cause = cause
        super().__init__(f"replica {replica} failed: {cause!r}")


@dataclass(frozen=True, eq=False)
class Trajectory:
    h: float
    states: np.ndarray  # (n_steps + 1, d)
    model: str
    seed: int
    replica: int = 0

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.states.shape[0])

    @property
    def span(self) -> float:
        return self.h * (self.states.shape[0] - 1)

    def to_csv(self, path, header: Sequence[str] = ()) -> None:
        """Write t, x1..xd; ``header`` lines are written first as '#' comments."""
        d = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{j + 1}" for j in range(d)])
            for t, x in zip(self.times, self.states):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x])


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    atoms: np.ndarray  # (n, d)
    weights: np.ndarray  # (n,)

    def __post_init__(self):
        if self.atoms.ndim != 2 or self.atoms.shape[0] < 1:
            raise ValueError("empirical measure needs at least one atom")
        if self.weights.shape != (self.atoms.shape[0],):
            raise ValueError("one weight per atom")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, atoms) -> "EmpiricalMeasure":
        atoms = np.asarray(atoms, float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        n = atoms.shape[0]
        return cls(atoms, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    @property
    def d(self) -> int:
        return self.atoms.shape[1]

    def integrate(self, f: Callable) -> float:
        return float(np.dot(self.weights, f(self.atoms)))

    def thin(self, m: int) -> "EmpiricalMeasure":
        """Keep ``m`` evenly spaced atoms (time order) with uniform weights."""
        if m >= self.n:
            return self
        idx = np.floor(np.arange(m) * (self.n / m)).astype(int)
        return EmpiricalMeasure.uniform(self.atoms[idx])


def default_burn_in(model: DiffusionModel, init: InitialDistribution) -> float:
    if init.kind == "stationary":
        return 0.0
    # both spectral families have gap 1; otherwise assume a unit gap too
    return 5.0


def _initial_states(model, init, replicas, seed):
    out = np.empty((len(replicas), model.d))
    for i, r in enumerate(replicas):
        out[i] = init.draw(model, make_rng(seed, PATH, r, 0))
    return model.domain.wrap(out)


def simulate_ensemble(
    model: DiffusionModel,
    init: InitialDistribution,
    t_end: float,
    h: float,
    seed: int,
    replicas: Sequence[int],
) -> np.ndarray:
    """Integrate several replicas at once; returns states of shape (R, n + 1, d).

    Replica ``r`` is bit-identical to ``simulate_path(..., replica=r)``.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    if not t_end >= h:
        raise ValueError("t_end must be at least h")
    n_steps = int(math.floor(t_end / h + 1e-9))
    replicas = [int(r) for r in replicas]
    R, d = len(replicas), model.d
    rngs = [make_rng(seed, PATH, r, 1) for r in replicas]
    out = np.empty((R, n_steps + 1, d))
    x = _initial_states(model, init, replicas, seed)
    out[:, 0] = x
    scale = math.sqrt(2.0 * h)
    wrap = model.domain.kind != "free"
    j = 0
    while j < n_steps:
        b = min(_BLOCK, n_steps - j)
        noise = np.stack([g.standard_normal((b, d)) for g in rngs], axis=1)
        noise *= scale
        for k in range(b):
            x = x + model.grad_V(x) * h + noise[k]
            if wrap:
                x = model.domain.wrap(x)
            out[:, j + k + 1] = x
        block = out[:, j + 1 : j + b + 1]
        if not np.all(np.isfinite(block)):
            bad_r, bad_k = np.argwhere(~np.all(np.isfinite(block), axis=2))[0]
            raise NumericalBlowup(
                j + int(bad_k) + 1,
                float(np.linalg.norm(block[bad_r, bad_k])),
                replicas[int(bad_r)],
            )
        j += b
    return out


def simulate_path(
    model: DiffusionModel,
    init: InitialDistribution,
    t_end: float,
    h: float,
    seed: int,
    replica: int = 0,
) -> Trajectory:
    """Euler-Maruyama path X_{j+1} = X_j + ∇V(X_j) h + sqrt(2h) ξ_j."""
    states = simulate_ensemble(model, init, t_end, h, seed, [replica])[0]
    return Trajectory(h=h, states=states, model=model.name, seed=int(seed), replica=int(replica))


def ou_exact_path(t_end: float, h: float, seed: int, replica: int = 0, d: int = 1) -> Trajectory:
    """Exact OU transitions on the step grid, stationary start (cross-check only)."""
    n_steps = int(math.floor(t_end / h + 1e-9))
    rng = make_rng(seed, PATH, replica, 2)
    a = math.exp(-h)
    s = math.sqrt(1.0 - a * a)
    z = rng.standard_normal((n_steps + 1, d))
    x = np.empty_like(z)
    x[0] = z[0]
    for j in range(n_steps):
        x[j + 1] = a * x[j] + s * z[j + 1]
    return Trajectory(h=h, states=x, model=f"ou-{d}d-exact", seed=int(seed), replica=int(replica))


def _window(h, n_states, t, burn_in):
    j0 = int(round(burn_in / h))
    n = int(round(t / h))
    if n < 1:
        raise ValueError("empty time window")
    if j0 + n > n_states - 1 + 1e-9:
        raise ValueError("window exceeds the trajectory span")
    return j0, n


def empirical_measure(traj, t: float, burn_in: float = 0.0) -> EmpiricalMeasure:
    """Left-endpoint Riemann discretization of (1/t)∫ δ_{X_s} ds over [burn_in, burn_in + t)."""
    states = traj.states if isinstance(traj, Trajectory) else np.asarray(traj)
    h = traj.h if isinstance(traj, Trajectory) else None
    if h is None:
        raise TypeError("empirical_measure needs a Trajectory")
    j0, n = _window(h, states.shape[0], t, burn_in)
    return EmpiricalMeasure.uniform(states[j0 : j0 + n])


def window_states(states: np.ndarray, h: float, t: float, burn_in: float = 0.0) -> np.ndarray:
    """Atoms of the empirical measure for an ensemble array (R, n + 1, d)."""
    j0, n = _window(h, states.shape[-2], t, burn_in)
    return states[..., j0 : j0 + n, :]


def trapezoid_average(values: np.ndarray, h: float, t: float) -> np.ndarray:
    """(1/t)∫ over a window sampled on n + 1 grid points along axis -2."""
    total = values.sum(axis=-2) - 0.5 * (values[..., 0, :] + values[..., -1, :])
    return total * (h / t)


def xi_coefficients(traj: Trajectory, basis: SpectralBasis, t: float, burn_in: float = 0.0) -> np.ndarray:
    """ξ_i = (1/t)∫ φ_i(X_s) ds over the window, trapezoidal rule."""
    j0, n = _window(traj.h, traj.states.shape[0], t, burn_in)
    if j0 + n > traj.states.shape[0] - 1:
        raise ValueError("trapezoid rule needs the window's right endpoint")
    phi = basis(traj.states[j0 : j0 + n + 1])
    return trapezoid_average(phi, traj.h, t)


# ---------------------------------------------------------------------------
# modified densities


def mu_quadrature(basis: SpectralBasis, n_nodes: Optional[int] = None):
    """Nodes and μ-weights of the fixed rule used for 1-D integrals against μ."""
    if basis.d != 1:
        raise ValueError("fixed quadrature rules are provided for 1-D models")
    if basis.family == "ou":
        from scipy.special import roots_hermitenorm

        x, w = roots_hermitenorm(n_nodes or 256)
        return x[:, None], w / math.sqrt(2.0 * math.pi)
    n = n_nodes or 4096
    x = 2.0 * math.pi * np.arange(n) / n
    return x[:, None], np.full(n, 1.0 / n)


@dataclass(frozen=True, eq=False)
class ModifiedDensity:
    """f = 1 + Σ exp(-λ_i ε) ξ_i φ_i; the constant mode is pinned to 1."""

    basis: SpectralBasis
    xi: np.ndarray
    eps: float = 0.0

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("smoothing must be nonnegative")
        if self.xi.shape != (self.basis.n,):
            raise ValueError("one coefficient per eigenfunction")

    @property
    def coefficients(self) -> np.ndarray:
        return np.exp(-self.basis.eigenvalues * self.eps) * self.xi

    def __call__(self, x) -> np.ndarray:
        return 1.0 + self.basis(x) @ self.coefficients

    def clipped(self, n_nodes: Optional[int] = None) -> "ClippedDensity":
        """max(f, 0) renormalized against μ (1-D models)."""
        x, w = mu_quadrature(self.basis, n_nodes)
        f = self(x)
        mass = float(np.dot(w, np.maximum(f, 0.0)))
        neg = float(np.dot(w, np.maximum(-f, 0.0)))
        return ClippedDensity(self, mass, neg)


@dataclass(frozen=True, eq=False)
class ClippedDensity:
    source: ModifiedDensity
    mass: float  # μ(f ∨ 0) before renormalization
    negative_mass: float  # μ((-f) ∨ 0), the clipping perturbation

    def __call__(self, x) -> np.ndarray:
        return np.maximum(self.source(x), 0.0) / self.mass


def modified_density_eval(md: ModifiedDensity, x) -> np.ndarray:
    return md(x)


# ---------------------------------------------------------------------------
# Monte Carlo


def resolve_threads(threads: Optional[int] = None) -> int:
    if threads is None:
        threads = int(os.environ.get("EOL_THREADS", "1") or 1)
    return max(1, int(threads))


@dataclass(frozen=True)
class MCResult:
    mean: float
    stderr: float
    values: np.ndarray
    seed: int
    statistic: str = "statistic"

    @property
    def R(self) -> int:
        return int(self.values.shape[0])

    def to_record(self) -> dict:
        return {
            "statistic": self.statistic,
            "mean": self.mean,
            "stderr": self.stderr,
            "R": self.R,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record())


def run_replicas(fn: Callable[[int], object], indices: Sequence[int], threads: Optional[int] = None) -> list:
    """Evaluate ``fn`` on each index, possibly in parallel, results in index order."""
    threads = resolve_threads(threads)

    def call(i):
        try:
            return fn(i)
        except ReplicaFailure:
            raise
        except Exception as exc:  # annotate with the replica index
            raise ReplicaFailure(i, exc) from exc

    if threads == 1 or len(indices) < 2:
        return [call(i) for i in indices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(call, indices))


def monte_carlo(
    statistic: Callable[[int, int], float],
    R: int,
    seed: int,
    threads: Optional[int] = None,
    name: str = "statistic",
) -> MCResult:
    """Mean and standard error of ``statistic(seed, replica)`` over R replicas."""
    if R < 2:
        raise ValueError("monte_carlo needs R >= 2")
    vals = run_replicas(lambda r: float(statistic(seed, r)), list(range(R)), threads)
    return summarize(np.asarray(vals, float), seed, name)


def summarize(values: np.ndarray, seed: int, name: str = "statistic") -> MCResult:
    values = np.asarray(values, float)
    R = values.shape[0]
    mean = float(np.mean(values))
    stderr = float(np.std(values, ddof=1) / math.sqrt(R)) if R > 1 else float("nan")
    return MCResult(mean, stderr, values, int(seed), name)


def batch_means_stderr(series: np.ndarray, n_batches: int = 20) -> float:
    """Standard error of a time average via non-overlapping batch means."""
    series = np.asarray(series, float)
    n = series.shape[0] // n_batches
    if n < 1:
        raise ValueError("series too short for batch means")
    batches = series[: n * n_batches].reshape(n_batches, n).mean(axis=1)
    return float(np.std(batches, ddof=1) / math.sqrt(n_batches))


__all__ = [
    "NumericalBlowup",
    "ReplicaFailure",
    "Trajectory",
    "EmpiricalMeasure",
    "ModifiedDensity",
    "ClippedDensity",
    "MCResult",
    "simulate_path",
    "simulate_ensemble",
    "ou_exact_path",
    "empirical_measure",
    "window_states",
    "xi_coefficients",
    "trapezoid_average",
    "modified_density_eval",
    "mu_quadrature",
    "monte_carlo",
    "run_replicas",
    "summarize",
    "batch_means_stderr",
    "resolve_threads",
    "default_burn_in",
    "stationary",
]
