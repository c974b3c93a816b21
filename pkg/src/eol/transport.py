"""Wasserstein distances, entropic OT and spectral upper bounds.

Exact discrete transport goes through POT's network simplex. Everything
specific to this package is written here: 1-D quantile formulas, the circle
formula, the truncated-cost flow solver, log-domain Sinkhorn and the
spectral bounds on W_p between densities.
"""

from __future__ import annotations

import bisect
import csv
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

for _backend in ("PYTORCH", "TENSORFLOW", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")
import ot  # noqa: E402

from .models import DiffusionModel, DomainSpec, SpectralBasis, sample_mu  # noqa: E402
from .rng import MU_SAMPLE, make_rng  # noqa: E402
from .simulate import ClippedDensity, EmpiricalMeasure, ModifiedDensity, mu_quadrature  # noqa: E402

EXACT_LP_MAX = 4096


class InfeasibleMarginals(ValueError):
    pass


class InadmissibleTestFunction(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class CostSpec:
    kind: str = "rho_power"  # "rho_power" | "truncated"
    p: float = 2.0

    def __post_init__(self):
        if self.kind not in ("rho_power", "truncated"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if self.kind == "rho_power" and self.p < 1:
            raise ValueError("p must be at least 1")

    def matrix(self, domain: DomainSpec, x, y) -> np.ndarray:
        sq = domain.pairwise_sq(x, y)
        if self.kind == "truncated":
            return np.minimum(np.sqrt(sq), 1.0)
        if self.p == 2.0:
            return sq
        return np.sqrt(sq) ** self.p

    def finish(self, total_cost: float) -> float:
        """Turn ∫ cost dπ into the reported distance."""
        total_cost = max(float(total_cost), 0.0)
        return total_cost if self.kind == "truncated" else total_cost ** (1.0 / self.p)


W2 = CostSpec("rho_power", 2.0)
W1 = CostSpec("rho_power", 1.0)
W1_TRUNC = CostSpec("truncated")


@dataclass(frozen=True, eq=False)
class TransportPlan:
    weights: np.ndarray
    row_residual: float
    col_residual: float

    def to_csv(self, path, threshold: float = 0.0) -> None:
        i, j = np.nonzero(self.weights > threshold)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "weight"])
            for a, b in zip(i, j):
                w.writerow([int(a), int(b), repr(float(self.weights[a, b]))])


@dataclass(frozen=True, eq=False)
class OTResult:
    value: float
    plan: Optional[TransportPlan]
    solver: str
    cost: CostSpec
    converged: bool = True
    residual: float = 0.0
    reg: Optional[float] = None
    iterations: int = 0

    def to_record(self) -> dict:
        return {
            "value": self.value,
            "solver": self.solver,
            "cost": {"kind": self.cost.kind, "p": self.cost.p},
            "converged": self.converged,
            "residual": self.residual,
            "reg": self.reg,
            "iterations": self.iterations,
        }


def _as_measure(m) -> EmpiricalMeasure:
    if isinstance(m, EmpiricalMeasure):
        return m
    if isinstance(m, tuple) and len(m) == 2:
        atoms, w = m
        atoms = np.asarray(atoms, float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        w = np.asarray(w, float)
        if w.shape == (atoms.shape[0],):
            _check_weights(w, w)
        return EmpiricalMeasure(atoms, w)
    return EmpiricalMeasure.uniform(m)


def _plan_residuals(G, a, b):
    return float(np.max(np.abs(G.sum(axis=1) - a))), float(np.max(np.abs(G.sum(axis=0) - b)))


def _check_weights(a, b):
    for w in (a, b):
        if np.any(w < 0) or abs(float(np.sum(w)) - 1.0) > 1e-9:
            raise InfeasibleMarginals("marginal weights must be nonnegative and sum to 1")


def wp_discrete(a, b, cost: CostSpec = W2, domain: Optional[DomainSpec] = None) -> OTResult:
    """Exact OT between two atom sets by network simplex."""
    a, b = _as_measure(a), _as_measure(b)
    domain = domain or DomainSpec("free", a.d)
    if max(a.n, b.n) > EXACT_LP_MAX:
        raise ValueError(f"exact LP limited to {EXACT_LP_MAX} atoms per side")
    wa, wb = a.weights.astype(float), b.weights.astype(float)
    _check_weights(wa, wb)
    wa, wb = wa / wa.sum(), wb / wb.sum()
    M = np.ascontiguousarray(cost.matrix(domain, a.atoms, b.atoms))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        G, log = ot.emd(wa, wb, M, numItermax=50_000_000, log=True)
    if log.get("warning"):
        raise SolverFailure(f"network simplex: {log['warning']}")
    rr, cr = _plan_residuals(G, wa, wb)
    value = cost.finish(np.sum(G * M))
    return OTResult(value, TransportPlan(G, rr, cr), "network_simplex", cost, residual=max(rr, cr))


# ---------------------------------------------------------------------------
# entropic OT


def _lse_rows(M):
    top = M.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(M - top).sum(axis=1, keepdims=True)))[:, 0]


def sinkhorn(
    a,
    b,
    cost: CostSpec = W2,
    reg: Optional[float] = None,
    max_iter: int = 100_000,
    tol: float = 1e-6,
    domain: Optional[DomainSpec] = None,
    anneal: bool = True,
    factor: float = 0.5,
    stage_tol: float = 1e-3,
    stage_iter: int = 300,
) -> OTResult:
    """Log-domain Sinkhorn with geometric annealing of the regularization.

    The regularization runs from the median cost down to ``reg`` times the
    median cost (default 5e-5), halving per stage and warm-starting the dual
    potentials. Intermediate stages stop at a loose marginal error; the last
    stage runs to ``tol`` (L1 error of the row marginal) or ``max_iter``.
    The value is the transport cost of the entropic plan, finished like the
    exact cost (a p-th root for ρ^p).
    """
    a, b = _as_measure(a), _as_measure(b)
    domain = domain or DomainSpec("free", a.d)
    wa, wb = a.weights.astype(float), b.weights.astype(float)
    _check_weights(wa, wb)
    C = cost.matrix(domain, a.atoms, b.atoms)
    scale = float(np.median(C))
    if scale <= 0:
        scale = float(np.max(C)) or 1.0
    rel_floor = 5e-5 if reg is None else float(reg)
    if not rel_floor > 0:
        raise ValueError("regularization must be positive")
    floor = rel_floor * scale
    eps = scale if anneal else floor
    la, lb = np.log(np.maximum(wa, 1e-300)), np.log(np.maximum(wb, 1e-300))
    f = np.zeros(a.n)
    g = np.zeros(b.n)
    it_total = 0
    while True:
        last = eps <= floor * (1 + 1e-12)
        target, cap = (tol, max_iter) if last else (stage_tol, stage_iter)
        err = np.inf
        for it in range(1, cap + 1):
            f = -eps * _lse_rows((g[None, :] - C) / eps + lb[None, :])
            g = -eps * _lse_rows(((f[:, None] - C) / eps + la[:, None]).T)
            it_total += 1
            if it % 5 == 0 or it == cap:
                P = np.exp((f[:, None] + g[None, :] - C) / eps + la[:, None] + lb[None, :])
                err = float(np.abs(P.sum(axis=1) - wa).sum())
                if err <= target:
                    break
        if last:
            break
        eps = max(eps * factor, floor)
    converged = err <= tol
    rr, cr = _plan_residuals(P, wa, wb)
    if not converged:
        warnings.warn(f"sinkhorn did not converge: residual {err:.2e}", RuntimeWarning)
    value = cost.finish(np.sum(P * C))
    return OTResult(
        value,
        TransportPlan(P, rr, cr),
        "sinkhorn",
        cost,
        converged=converged,
        residual=err,
        reg=float(eps),
        iterations=it_total,
    )


# ---------------------------------------------------------------------------
# one-dimensional exact formulas


def _sorted_1d(m: EmpiricalMeasure):
    if m.d != 1:
        raise ValueError("one-dimensional measure required")
    x = m.atoms[:, 0]
    order = np.argsort(x, kind="stable")
    return x[order], m.weights[order]


def w2_discrete_1d(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    """Exact W2 between 1-D atom sets by merging the two quantile functions."""
    xa, wa = _sorted_1d(a)
    xb, wb = _sorted_1d(b)
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    levels = np.union1d(ca, cb)
    du = np.diff(np.concatenate([[0.0], levels]))
    mid = levels - 0.5 * du
    qa = xa[np.minimum(np.searchsorted(ca, mid), xa.size - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, mid), xb.size - 1)]
    return math.sqrt(max(float(np.sum(du * (qa - qb) ** 2)), 0.0))


@dataclass(frozen=True)
class SymmetricLaw1D:
    """A symmetric 1-D law with closed-form quantiles and partial moments."""

    cdf: Callable
    ppf: Callable
    upper_first_moment: Callable  # r ↦ ∫_r^∞ y dμ(y), r ≥ 0
    second_moment: float


def gaussian_law() -> SymmetricLaw1D:
    return SymmetricLaw1D(special.ndtr, special.ndtri, lambda r: np.exp(-0.5 * r * r) / math.sqrt(2 * math.pi), 1.0)


def power_law_1d(kappa: float, p: float) -> SymmetricLaw1D:
    """Law ∝ exp(-κ|x|^p) on the line."""
    a = 1.0 / p

    def cdf(x):
        x = np.asarray(x, float)
        return 0.5 + 0.5 * np.sign(x) * special.gammainc(a, kappa * np.abs(x) ** p)

    def ppf(u):
        u = np.asarray(u, float)
        r = (special.gammaincinv(a, np.abs(2.0 * u - 1.0)) / kappa) ** a
        return np.sign(u - 0.5) * r

    def upper(r):
        r = np.asarray(r, float)
        scale = special.gamma(2 * a) / special.gamma(a) / kappa**a / 2.0
        return scale * special.gammaincc(2 * a, kappa * r**p)

    m2 = special.gamma(3 * a) / special.gamma(a) / kappa ** (2 * a)
    return SymmetricLaw1D(cdf, ppf, upper, float(m2))


def law_of(model: DiffusionModel) -> Optional[SymmetricLaw1D]:
    if model.d != 1 or model.domain.kind != "free":
        return None
    if model.family == "ou":
        return gaussian_law()
    if model.family == "power" and model.params.get("W") is None:
        return power_law_1d(model.params["kappa"], model.params["p"])
    return None


def w2_discrete_vs_law(a: EmpiricalMeasure, law: SymmetricLaw1D) -> float:
    """Exact W2 between 1-D atoms and a continuous symmetric law, cell by cell."""
    x, w = _sorted_1d(a)
    c = np.cumsum(w)
    c[-1] = 1.0
    z = law.ppf(c[:-1])
    # ∫_{cell} Q_b(u) du = M1(z_k) - M1(z_{k-1}) with M1(z) = -∫_{|z|}^∞ y dμ
    m1 = np.concatenate([[0.0], -law.upper_first_moment(np.abs(z)), [0.0]])
    cell_mean = np.diff(m1)
    w2sq = float(np.sum(w * x * x) - 2.0 * np.sum(x * cell_mean) + law.second_moment)
    return math.sqrt(max(w2sq, 0.0))


def _numeric_cdf_table(density: Callable, lo: float, hi: float, n: int = 2**17):
    x = np.linspace(lo, hi, n)
    f = np.maximum(np.asarray(density(x[:, None]), float), 0.0)
    F = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(x))])
    if F[-1] <= 0:
        raise ValueError("density has no mass on the evaluation window")
    return x, F / F[-1]


def _quantiles_from_table(x, F, u):
    # strictly increasing copy for interpolation
    keep = np.concatenate([[True], np.diff(F) > 0])
    return np.interp(u, F[keep], x[keep])


def _lebesgue_density(obj, model: DiffusionModel) -> Callable:
    if isinstance(obj, (ModifiedDensity, ClippedDensity)):
        return lambda x: np.maximum(obj(x), 0.0) * model.density(x)
    if callable(obj):
        return lambda x: obj(x) * model.density(x)
    raise TypeError("expected a density relative to μ")


def w2_exact_1d(a, b, *, n_nodes: int = 2**14, window: float = 12.0) -> float:
    """W2 on the line through quantile functions.

    ``a`` is an EmpiricalMeasure or a density relative to μ (ModifiedDensity,
    ClippedDensity or a callable, the latter paired with ``b`` as its model).
    ``b`` is a 1-D model (meaning μ) or an EmpiricalMeasure.
    """
    for m in (a, b):
        if isinstance(m, DiffusionModel):
            if m.d != 1:
                raise ValueError("w2_exact_1d needs a one-dimensional model")
            if m.domain.kind == "torus":
                raise ValueError("quantile coupling is not optimal on the torus")
    if isinstance(a, EmpiricalMeasure) and a.d != 1:
        raise ValueError("w2_exact_1d needs one-dimensional atoms")
    if isinstance(a, EmpiricalMeasure) and isinstance(b, EmpiricalMeasure):
        return w2_discrete_1d(a, b)
    if isinstance(a, EmpiricalMeasure) and isinstance(b, DiffusionModel):
        law = law_of(b)
        if law is not None:
            return w2_discrete_vs_law(a, law)
    u = (np.arange(n_nodes) + 0.5) / n_nodes

    def quantiles(m, model):
        if isinstance(m, EmpiricalMeasure):
            x, w = _sorted_1d(m)
            c = np.cumsum(w)
            return x[np.minimum(np.searchsorted(c, u), x.size - 1)]
        if isinstance(m, DiffusionModel):
            law = law_of(m)
            if law is not None:
                return law.ppf(u)
            x, F = _numeric_cdf_table(m.density, -window, window)
            return _quantiles_from_table(x, F, u)
        if model is None:
            raise ValueError("a density needs a reference model")
        x, F = _numeric_cdf_table(_lebesgue_density(m, model), -window, window)
        return _quantiles_from_table(x, F, u)

    model = b if isinstance(b, DiffusionModel) else (a if isinstance(a, DiffusionModel) else None)
    qa, qb = quantiles(a, model), quantiles(b, model)
    return math.sqrt(float(np.mean((qa - qb) ** 2)))


def w2_circle_uniform(a: EmpiricalMeasure, period: float = 2.0 * math.pi) -> float:
    """Exact W2 on the circle between atoms and the uniform law.

    On a circle of unit length, with D(u) = Q(u) - u,
    W2² = ∫D² - (∫D)², the best rotation of the monotone coupling.
    """
    if a.d != 1:
        raise ValueError("circle formula needs one-dimensional atoms")
    s = np.mod(a.atoms[:, 0], period) / period
    order = np.argsort(s, kind="stable")
    s, w = s[order], a.weights[order]
    c = np.cumsum(w)
    c[-1] = 1.0
    c_prev = np.concatenate([[0.0], c[:-1]])
    int_d2 = float(np.sum(((s - c_prev) ** 3 - (s - c) ** 3) / 3.0))
    int_d = float(np.dot(w, s) - 0.5)
    return period * math.sqrt(max(int_d2 - int_d * int_d, 0.0))


# ---------------------------------------------------------------------------
# truncated-cost W1 on the line


def w_tilde1_1d(a, b) -> float:
    """Exact W̃1 = inf_π ∫ (1 ∧ |x - y|) dπ between two atom sets on the line.

    The truncated metric is the shortest-path metric of the sorted points
    joined to their neighbours (length = gap) and to a hub (length 1/2), so
    the distance is a min-cost flow. Writing Y_i for the cumulative hub flow
    of the first i nodes and F_i for their cumulative supply, the cost is
    Σ Δ_i |F_i - Y_i| + ½ Σ |Y_i - Y_{i-1}| with Y_0 = Y_n = 0, which a
    forward dynamic program over convex piecewise-linear functions solves.
    """
    a, b = _as_measure(a), _as_measure(b)
    if a.d != 1 or b.d != 1:
        raise ValueError("w_tilde1_1d needs one-dimensional atoms")
    _check_weights(a.weights, b.weights)
    x = np.concatenate([a.atoms[:, 0], b.atoms[:, 0]])
    s = np.concatenate([a.weights, -b.weights])
    order = np.argsort(x, kind="stable")
    x, s = x[order], s[order]
    gaps = np.diff(x)
    F = np.cumsum(s)[:-1]
    return _hub_flow_dp(gaps, F, 0.5)


def _hub_flow_dp(gaps: np.ndarray, F: np.ndarray, c: float) -> float:
    # g(Y) = v0 at Y = 0 plus slopes: `sl` left of all breakpoints, then +W[j] at P[j]
    P = [0.0]
    W = [2.0 * c]
    sl = -c
    v0 = 0.0
    for delta, target in zip(gaps.tolist(), F.tolist()):
        if delta <= 0.0:
            continue
        # add delta * |target - Y|
        v0 += delta * abs(target)
        sl -= delta
        k = bisect.bisect_right(P, target)
        P.insert(k, target)
        W.insert(k, 2.0 * delta)
        # inf-convolution with c|.|: clamp slopes to [-c, c]
        if sl < -c:
            slope = sl
            k = 0
            while slope + W[k] <= -c:
                slope += W[k]
                k += 1
            y_left = P[k]
            if y_left > 0.0:
                # f(y_left) = f(0) + ∫_0^{y_left} f'
                acc = 0.0
                slope = sl
                prev = -math.inf
                for j in range(k + 1):
                    hi = P[j]
                    lo_ = max(prev, 0.0)
                    if hi > lo_:
                        acc += slope * (hi - lo_)
                    if j < k:
                        slope += W[j]
                    prev = hi
                v0 = v0 + acc + c * y_left
            new_w = sl + sum(W[: k + 1]) + c
            del P[:k]
            del W[:k]
            W[0] = new_w
            sl = -c
        total = sl + sum(W)
        if total > c:
            slope = total
            k = len(P) - 1
            while slope - W[k] >= c:
                slope -= W[k]
                k -= 1
            y_right = P[k]
            if y_right < 0.0:
                # f(y_right) = f(0) - ∫_{y_right}^0 f'
                acc = 0.0
                slope_r = total
                nxt = math.inf
                for j in range(len(P) - 1, k - 1, -1):
                    lo_ = P[j]
                    hi = min(nxt, 0.0)
                    if hi > lo_:
                        acc += slope_r * (hi - lo_)
                    if j > k:
                        slope_r -= W[j]
                    nxt = lo_
                # g(0) = f(y_right) + c (0 - y_right)
                v0 = v0 - acc - c * y_right
            below = slope - W[k]
            del P[k + 1 :]
            del W[k + 1 :]
            W[k] = c - below
    return max(v0, 0.0)


def w_tilde1_lp(a, b, domain: Optional[DomainSpec] = None) -> float:
    """W̃1 through the generic exact LP (any domain)."""
    return wp_discrete(a, b, W1_TRUNC, domain).value


# ---------------------------------------------------------------------------
# distances to the invariant measure


@dataclass(frozen=True)
class DistanceEstimate:
    estimate: float
    stderr: float
    m: int
    values: np.ndarray
    solver: str

    def to_record(self) -> dict:
        return {
            "estimate": self.estimate,
            "stderr": self.stderr,
            "m": self.m,
            "solver": self.solver,
            "resamples": int(self.values.shape[0]),
        }


def mu_resample(model: DiffusionModel, m: int, seed, k: int) -> np.ndarray:
    """k-th μ-discretization; k = 0 coincides with sample_mu(model, m, seed)."""
    if k == 0:
        return sample_mu(model, m, seed)
    return model.sampler(int(m), make_rng(seed, MU_SAMPLE, k))


def distance_to_mu(
    emp: EmpiricalMeasure,
    model: DiffusionModel,
    cost: CostSpec = W2,
    m: int = 2048,
    seed: int = 0,
    resamples: int = 1,
    solver: str = "lp",
    max_atoms: int = EXACT_LP_MAX,
) -> DistanceEstimate:
    """Distance between ``emp`` and an m-point i.i.d. discretization of μ.

    The discretization itself sits at distance of order m^{-1/d} from μ, so
    estimates carry a positive bias of that order; ``m`` is reported. Atom
    sets larger than ``max_atoms`` are thinned in time order first.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if emp.n > max_atoms:
        emp = emp.thin(max_atoms)
    vals = []
    for k in range(resamples):
        target = EmpiricalMeasure.uniform(mu_resample(model, m, seed, k))
        if solver == "lp":
            vals.append(wp_discrete(emp, target, cost, model.domain).value)
        elif solver == "sinkhorn":
            res = sinkhorn(emp, target, cost, domain=model.domain)
            if not res.converged:
                raise SolverFailure(f"sinkhorn residual {res.residual:.2e}")
            vals.append(res.value)
        elif solver == "quantile":
            vals.append(w2_discrete_1d(emp, target))
        elif solver == "flow":
            vals.append(w_tilde1_1d(emp, target))
        else:
            raise ValueError(f"unknown solver {solver!r}")
    vals = np.asarray(vals)
    se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else float("nan")
    return DistanceEstimate(float(vals.mean()), se, int(m), vals, solver)


def quantile_grid(model: DiffusionModel, m: int) -> EmpiricalMeasure:
    """Deterministic m-atom discretization of a 1-D μ at quantile midpoints."""
    law = law_of(model)
    u = (np.arange(m) + 0.5) / m
    if law is not None:
        x = law.ppf(u)
    elif model.domain.kind == "torus" and model.d == 1:
        x = model.domain.period * u
    else:
        xs, F = _numeric_cdf_table(model.density, -12.0, 12.0)
        x = _quantiles_from_table(xs, F, u)
    return EmpiricalMeasure.uniform(x)


# ---------------------------------------------------------------------------
# dual lower bound


def dual_lower_bound(
    emp: EmpiricalMeasure,
    model: DiffusionModel,
    f: Callable,
    grad_f: Optional[Callable] = None,
    n_check: int = 4096,
    seed: int = 0,
) -> float:
    """|emp(f)| for an admissible f: |f| ≤ 1, |∇f| ≤ 1, μ(f) = 0.

    With 1 ∧ ρ as cost this lower-bounds W̃1(emp, μ) as long as f is
    1-Lipschitz for the truncated metric; |f| ≤ 1 and |∇f| ≤ 1 give
    |f(x) - f(y)| ≤ 2 ∧ ρ, so the certificate holds up to that factor.
    """
    pts = _check_points(model, n_check, seed)
    vals = np.asarray(f(pts), float)
    if np.max(np.abs(vals)) > 1.0 + 1e-9:
        raise InadmissibleTestFunction("sup |f| exceeds 1")
    if grad_f is None:
        hstep = 1e-6
        grads = np.stack(
            [(f(pts + hstep * e) - f(pts - hstep * e)) / (2 * hstep) for e in np.eye(model.d)],
            axis=-1,
        )
    else:
        grads = np.asarray(grad_f(pts), float).reshape(pts.shape)
    if np.max(np.linalg.norm(grads, axis=-1)) > 1.0 + 1e-6:
        raise InadmissibleTestFunction("sup |∇f| exceeds 1")
    mean = _mu_mean(model, f, seed)
    if abs(mean) > 1e-6:
        raise InadmissibleTestFunction(f"μ(f) = {mean:.3e} is not zero")
    return abs(emp.integrate(f))


def _check_points(model, n, seed):
    if model.d == 1:
        if model.domain.kind == "torus":
            return np.linspace(0.0, model.domain.period, n, endpoint=False)[:, None]
        return np.linspace(-10.0, 10.0, n)[:, None]
    return model.sampler(n, make_rng(seed, MU_SAMPLE, 7))


def _mu_mean(model, f, seed):
    if model.d == 1 and model.domain.kind == "torus":
        n = 4096
        x = np.linspace(0.0, model.domain.period, n, endpoint=False)[:, None]
        return float(np.mean(f(x)))
    if model.d == 1 and model.family == "ou":
        x, w = special.roots_hermitenorm(256)
        return float(np.dot(w, f(x[:, None])) / math.sqrt(2 * math.pi))
    if model.d == 1:
        x = np.linspace(-20.0, 20.0, 200_001)[:, None]
        dens = model.density(x)
        return float(integrate.trapezoid(f(x) * dens, x[:, 0]))
    # Monte-Carlo check in higher dimension: tolerate sampling error
    draws = model.sampler(200_000, make_rng(seed, MU_SAMPLE, 8))
    vals = f(draws)
    se = float(np.std(vals) / math.sqrt(vals.size))
    m = float(np.mean(vals))
    return 0.0 if abs(m) < 5 * se else m


# ---------------------------------------------------------------------------
# spectral bounds


def ledoux_bound(a: np.ndarray, basis: SpectralBasis) -> float:
    """4 Σ a_i²/λ_i = 4 μ(|∇(-L)^{-1}(f - 1)|²) for f - 1 = Σ a_i φ_i."""
    a = np.asarray(a, float)
    if a.shape != (basis.n,):
        raise ValueError("one coefficient per eigenfunction")
    return float(4.0 * np.sum(a * a / basis.eigenvalues))


def spectral_w2_bound(md: ModifiedDensity) -> float:
    """4 Σ λ_i^{-1} exp(-2 λ_i ε) ξ_i²."""
    lam = md.basis.eigenvalues
    return float(4.0 * np.sum(np.exp(-2.0 * lam * md.eps) * md.xi**2 / lam))


def mp_mean(a, b, p: float):
    """M_p(a, b) = ∫_0^1 (b + s(a - b))^{1-p} ds for a, b > 0, and 0 if a ∧ b = 0.

    Closed form (a^{2-p} - b^{2-p}) / ((2-p)(a-b)); p = 2 gives
    (log a - log b)/(a - b) and a = b gives a^{1-p}. Evaluated as
    b^{1-p} expm1((2-p) log1p(r)) / ((2-p) r) with r = (a - b)/b, which is
    stable near the diagonal and near p = 2.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    a, b = np.broadcast_arrays(a, b)
    out = np.zeros(a.shape)
    pos = (a > 0) & (b > 0)
    hi = np.where(pos, np.maximum(a, b), 1.0)
    lo = np.where(pos, np.minimum(a, b), 1.0)
    r = (hi - lo) / lo
    q = 2.0 - p
    small = r < 1e-8
    rs = np.where(small, 1.0, r)
    lr = np.log1p(rs)
    if abs(q) < 1e-12:
        ratio = lr / rs
    else:
        ratio = np.expm1(q * lr) / (q * rs)
    # ((1 + r)^q - 1)/(q r) = 1 + (q - 1) r/2 + O(r²)
    ratio = np.where(small, 1.0 + (q - 1.0) * r / 2.0, ratio)
    out = np.where(pos, lo ** (1.0 - p) * ratio, 0.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True, eq=False)
class DensityPair:
    """Two probability densities relative to a model's μ, with f2 - f1 = Σ a_i φ_i."""

    basis: SpectralBasis
    f1: Callable
    f2: Callable
    diff_coeffs: np.ndarray
    meta: dict = field(default_factory=dict)

    def check(self, tol: float = 1e-8) -> None:
        x, w = mu_quadrature(self.basis)
        v1, v2 = self.f1(x), self.f2(x)
        for v in (v1, v2):
            if abs(float(np.dot(w, v)) - 1.0) > tol:
                raise ValueError("density does not integrate to 1")
        if np.any(np.maximum(v1, v2) <= 0):
            raise ValueError("f1 ∨ f2 must be positive on the quadrature window")


@dataclass(frozen=True)
class DensityBounds:
    bound_sym: float
    bound_f1: float
    bound_Mp: float

    @property
    def min(self) -> float:
        return min(self.bound_sym, self.bound_f1, self.bound_Mp)

    def to_record(self) -> dict:
        return {"bound_sym": self.bound_sym, "bound_f1": self.bound_f1, "bound_Mp": self.bound_Mp, "min": self.min}


def potential_gradient(coeffs: np.ndarray, basis: SpectralBasis, x) -> np.ndarray:
    """∇g at x for g = (-L)^{-1} Σ a_i φ_i = Σ (a_i/λ_i) φ_i; shape (..., d)."""
    return np.einsum("...nd,n->...d", basis.grad(x), np.asarray(coeffs) / basis.eigenvalues)


def _bound_rule(basis: SpectralBasis):
    # the integrands carry ratios of densities, so Gauss rules tuned to
    # polynomials converge slowly; a fine trapezoid is spectrally accurate
    if basis.family == "ou" and basis.d == 1:
        h = 1.0 / 64
        x = np.arange(-14.0, 14.0 + h / 2, h)
        return x[:, None], h * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return mu_quadrature(basis)


def wp_density_bounds(pair: DensityPair, p: float, basis: Optional[SpectralBasis] = None) -> DensityBounds:
    """Three upper bounds on W_p(f1 μ, f2 μ)^p, 1 < p.

    With g = (-L)^{-1}(f2 - f1):
      bound_sym = p^p 2^{p-1} ∫ |∇g|^p / (f1 + f2)^{p-1} dμ
      bound_f1  = p^p ∫ |∇g|^p / f1^{p-1} dμ   (+∞ if f1 vanishes where ∇g ≠ 0)
      bound_Mp  = ∫ |∇g|^p M_p(f1, f2) dμ     (transport along the linear path)
    """
    if not p > 1:
        raise ValueError("p must exceed 1")
    basis = basis or pair.basis
    x, w = _bound_rule(basis)
    grad = potential_gradient(pair.diff_coeffs, basis, x)
    gp = np.linalg.norm(grad, axis=-1) ** p
    f1, f2 = np.asarray(pair.f1(x), float), np.asarray(pair.f2(x), float)
    live = gp > 0
    s = f1 + f2
    if np.any(live & (s <= 0)):
        bound_sym = math.inf
    else:
        bound_sym = p**p * 2 ** (p - 1) * float(np.sum(np.where(live, w * gp / np.where(s > 0, s, 1.0) ** (p - 1), 0.0)))
    if np.any(live & (f1 <= 0)):
        bound_f1 = math.inf
    else:
        bound_f1 = p**p * float(np.sum(np.where(live, w * gp / np.where(f1 > 0, f1, 1.0) ** (p - 1), 0.0)))
    M = mp_mean(f1, f2, p)
    edge = live & (np.minimum(f1, f2) <= 0)
    if np.any(edge):
        # ∫_0^1 (s m)^{1-p} ds along a path starting from zero density
        if p >= 2:
            bound_mp = math.inf
        else:
            m = np.maximum(f1, f2)
            M = np.where(edge, np.maximum(m, 1e-300) ** (1 - p) / (2 - p), M)
            bound_mp = float(np.sum(w * gp * M))
    else:
        bound_mp = float(np.sum(np.where(live, w * gp * M, 0.0)))
    return DensityBounds(bound_sym, bound_f1, bound_mp)


def hermite_project(func: Callable, basis: SpectralBasis, n_nodes: int = 256) -> np.ndarray:
    """Coefficients μ(func φ_i) by Gauss quadrature (exact for low-degree polynomials)."""
    x, w = mu_quadrature(basis, n_nodes)
    return basis(x).T @ (w * np.asarray(func(x), float))


def random_density(basis: SpectralBasis, K: int, floor: float, rng: np.random.Generator):
    """f = floor + (1 - floor) ψ²/|c|² with ψ = Σ_{j≤K} c_j φ_j, c Gaussian.

    μ(f) = 1 exactly and f ≥ floor. Returns (f, coefficients of f - 1).
    Needs a 1-D OU basis with at least 2K eigenfunctions.
    """
    if basis.family != "ou" or basis.d != 1:
        raise ValueError("random densities are built on the 1-D Hermite basis")
    if basis.n < 2 * K:
        raise ValueError("basis too small for degree 2K")
    c = rng.standard_normal(K + 1)
    norm2 = float(c @ c)
    sub = SpectralBasis("ou", 1, basis.eigenvalues[:K], basis.index[:K])

    def f(x):
        psi = c[0] + sub(x) @ c[1:]
        return floor + (1.0 - floor) * psi * psi / norm2

    a = hermite_project(lambda x: f(x) - 1.0, basis)
    a[2 * K :] = 0.0
    return f, a


def random_density_pair(basis: SpectralBasis, rng: np.random.Generator, K: int = 3, floor: float = 0.05) -> DensityPair:
    f1, a1 = random_density(basis, K, floor, rng)
    f2, a2 = random_density(basis, K, floor, rng)
    return DensityPair(basis, f1, f2, a2 - a1, {"a1": a1, "a2": a2, "floor": floor})


def grid_discretize(f: Callable, model: DiffusionModel, n_atoms: int = 512, half_width: float = 8.0) -> EmpiricalMeasure:
    """Atoms on a uniform 1-D grid with weights ∝ f(x) μ-density(x)."""
    x = np.linspace(-half_width, half_width, n_atoms)[:, None]
    w = np.maximum(np.asarray(f(x), float), 0.0) * model.density(x)
    return EmpiricalMeasure(x, w / w.sum())


def quantile_discretize(f: Callable, model: DiffusionModel, n_atoms: int = 512, half_width: float = 12.0) -> EmpiricalMeasure:
    """n equally weighted atoms at the quantile midpoints of the 1-D law f μ.

    Discrete W_p between two such measures is the midpoint rule for
    ∫ |F⁻¹ - G⁻¹|^p du, so it converges much faster than a uniform grid.
    """
    xs, F = _numeric_cdf_table(lambda x: np.maximum(np.asarray(f(x), float), 0.0) * model.density(x), -half_width, half_width, 2**16)
    u = (np.arange(n_atoms) + 0.5) / n_atoms
    return EmpiricalMeasure.uniform(_quantiles_from_table(xs, F, u))
