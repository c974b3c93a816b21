"""Rate functionals, predicted exponents and log-log rate fits.

γ(t) is the heat-kernel trace, β(ε) its double integral from ε to 1,
α(ε) the stationary mean-squared displacement over time ε, and γ̃, β̃ the
ball-mass analogues. The upper bound on E W2(μ_t, μ)² scales like
inf_ε {α(ε) + β(ε)/t}; predicted exponents are compared with fitted slopes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import integrate, special, stats

from .models import DiffusionModel, SpectralBasis, _torus_counts, eigen_pairs
from .rng import AUX, make_rng


class DivergentIntegral(ValueError):
    pass


class NonSummableSpectrum(ValueError):
    pass


# ---------------------------------------------------------------------------
# γ and β


@dataclass(frozen=True)
class TraceValue:
    value: float
    tail: float


def gamma_spectral(basis: SpectralBasis, t: float) -> TraceValue:
    """Truncated trace 1 + Σ_{i≤N} exp(-λ_i t) with the omitted remainder."""
    if not t > 0:
        raise ValueError("t must be positive")
    value = 1.0 + float(np.sum(np.exp(-basis.eigenvalues * t)))
    tail = basis.trace_tail(t)
    if tail > 1e-8:
        warnings.warn(f"trace truncation tail {tail:.2e} at t = {t:g}", RuntimeWarning)
    return TraceValue(value, tail)


def gamma_exact(source: Union[SpectralBasis, DiffusionModel]) -> Callable[[float], float]:
    """γ(t) over the whole spectrum, in closed form (OU and torus)."""
    basis = source if isinstance(source, SpectralBasis) else eigen_pairs(source, 1)

    def gamma(t):
        return 1.0 + basis.full_trace(float(t))

    return gamma


@dataclass(frozen=True)
class PowerGamma:
    """γ(t) = c t^{-a}; β then has a closed form."""

    a: float
    c: float = 1.0

    def __call__(self, t):
        return self.c * np.asarray(t, float) ** (-self.a)


def _int_pow(eps: float, q: float) -> float:
    """∫_ε^1 t^{q-1} dt."""
    if q == 0:
        return -math.log(eps)
    return -math.expm1(q * math.log(eps)) / q


def beta_power(eps: float, a: float, c: float = 1.0) -> float:
    """β(ε) = 1 + c ∫_ε^1 (t - ε) t^{-a} dt."""
    if eps == 0:
        if a >= 2:
            raise DivergentIntegral("∫_0 t^{1-a} dt diverges for a >= 2")
        return 1.0 + c / (2.0 - a)
    return 1.0 + c * (_int_pow(eps, 2.0 - a) - eps * _int_pow(eps, 1.0 - a))


def beta_fn(gamma, eps: float, tol: float = 1e-10) -> float:
    """β(ε) = 1 + ∫_ε^1 ds ∫_s^1 γ(t) dt = 1 + ∫_ε^1 (t - ε) γ(t) dt.

    The double integral is collapsed by Fubini and evaluated by adaptive
    quadrature; ``gamma`` may be a callable, a SpectralBasis (exact trace)
    or a PowerGamma (closed form).
    """
    if not 0 <= eps <= 1:
        raise ValueError("ε must lie in (0, 1]")
    if isinstance(gamma, PowerGamma):
        return beta_power(eps, gamma.a, gamma.c)
    if isinstance(gamma, SpectralBasis):
        gamma = gamma_exact(gamma)
    if eps == 0:
        raise DivergentIntegral("β(0) requested for a general γ")
    if eps == 1:
        return 1.0
    # split on a log scale so the quadrature resolves a singular γ near ε
    knots = np.unique(np.concatenate([[eps], np.geomspace(eps, 1.0, 12), [1.0]]))
    total = 0.0
    for lo, hi in zip(knots[:-1], knots[1:]):
        val, _ = integrate.quad(lambda t: (t - eps) * gamma(t), lo, hi, epsabs=0.0, epsrel=tol, limit=200)
        total += val
    return 1.0 + total


def beta_ou_symbolic(eps: float) -> float:
    """β(ε) for the 1-D OU trace from termwise antiderivatives.

    ∫_ε^1 (t - ε) exp(-i t) dt = [exp(-i ε) - exp(-i)(1 + i(1 - ε))]/i²,
    and the sums over i are dilogarithms and a logarithm.
    """

    def li2(z):
        return float(special.spence(1.0 - z))

    q = math.exp(-1.0)
    return (
        1.0
        + 0.5 * (1.0 - eps) ** 2
        + li2(math.exp(-eps))
        - li2(q)
        + (1.0 - eps) * math.log1p(-q)
    )


# ---------------------------------------------------------------------------
# α


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float = 0.0
    meta: dict = field(default_factory=dict)


def alpha_fn(
    model: DiffusionModel,
    eps: float,
    method: str = "auto",
    R: int = 100_000,
    seed: int = 0,
    h_max: float = 1e-3,
) -> Estimate:
    """α(ε) = E^μ ρ(X_0, X_ε)², analytic for OU, Monte Carlo otherwise."""
    if not 0 < eps <= 1:
        raise ValueError("ε must lie in (0, 1]")
    if method == "auto":
        method = "analytic" if model.family == "ou" else "mc"
    if method == "analytic":
        if model.family != "ou":
            raise ValueError("analytic α is available for the OU model only")
        return Estimate(2.0 * model.d * -math.expm1(-eps))
    rng = make_rng(seed, AUX, 1)
    x0 = model.sampler(R, rng)
    n_steps = max(1, int(math.ceil(eps / h_max)))
    h = eps / n_steps
    x = x0.copy()
    for _ in range(n_steps):
        x = x + model.grad_V(x) * h + math.sqrt(2.0 * h) * rng.standard_normal(x.shape)
        if model.domain.kind != "free":
            x = model.domain.wrap(x)
    sq = model.domain.metric(x0, x) ** 2
    return Estimate(float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(R)), {"steps": n_steps, "R": R})


# ---------------------------------------------------------------------------
# the ε-optimization


@dataclass(frozen=True)
class OptResult:
    eps: float
    value: float


def upper_bound_opt(
    alpha: Callable[[float], float],
    beta: Callable[[float], float],
    t: float,
    c_alpha: float = 1.0,
    c_beta: float = 1.0,
    eps_min: Optional[float] = None,
    n_grid: int = 64,
    n_golden: int = 40,
) -> OptResult:
    """Minimize c_α α(ε) + c_β β(ε)/t over ε ∈ [eps_min, 1].

    A 64-point log grid brackets the minimum, then golden-section search in
    log ε refines it. ``eps_min`` defaults to 1e-6/t so that an optimum near
    ε ~ 1/t stays interior at every horizon.
    """
    if not t >= 1:
        raise ValueError("t must be at least 1")
    eps_min = 1e-6 / t if eps_min is None else eps_min

    def obj(le):
        e = math.exp(le)
        return c_alpha * float(alpha(e)) + c_beta * float(beta(e)) / t

    grid = np.linspace(math.log(eps_min), 0.0, n_grid)
    vals = np.array([obj(g) for g in grid])
    k = int(np.argmin(vals))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, n_grid - 1)]
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - phi * (hi - lo)
    d = lo + phi * (hi - lo)
    fc, fd = obj(c), obj(d)
    for _ in range(n_golden):
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - phi * (hi - lo)
            fc = obj(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + phi * (hi - lo)
            fd = obj(d)
    best_le, best = (c, fc) if fc < fd else (d, fd)
    if vals[k] < best:
        best_le, best = grid[k], float(vals[k])
    return OptResult(math.exp(best_le), best)


# ---------------------------------------------------------------------------
# γ̃ and β̃


def _ball_volume(d: int, r: float) -> float:
    return math.pi ** (d / 2.0) / special.gamma(d / 2.0 + 1.0) * r**d


def _radial(model: DiffusionModel) -> bool:
    return model.family == "ou" or (model.family == "power" and model.params.get("W") is None)


def _log_ball_integral(model, xs, r, n_nodes=96):
    """log ∫_{B(0,r)} exp(V(x + u) - V(x)) du for points on the first axis."""
    d = model.d
    g1, w1 = np.polynomial.legendre.leggauss(n_nodes)
    xs = np.asarray(xs, float)
    if d == 1:
        u = r * g1
        pts = xs[:, None] + u[None, :]
        expo = model.potential(pts[..., None]) - model.potential(xs[:, None])[:, None]
        return special.logsumexp(expo, b=(r * w1)[None, :], axis=1)
    # axial coordinate u1 and perpendicular radius ρ, weight S_{d-2} ρ^{d-2}
    sphere = 2.0 * math.pi ** ((d - 1) / 2.0) / special.gamma((d - 1) / 2.0)
    u1 = r * g1
    wu = r * w1
    half = np.sqrt(np.maximum(r * r - u1 * u1, 0.0))
    rho = 0.5 * half[:, None] * (g1[None, :] + 1.0)
    wr = 0.5 * half[:, None] * w1[None, :] * sphere * rho ** (d - 2)
    weight = wu[:, None] * wr  # (n, n)
    out = np.empty(xs.shape[0])
    for k, x in enumerate(xs):
        pts = np.zeros((n_nodes, n_nodes, d))
        pts[..., 0] = x + u1[:, None]
        pts[..., 1] = rho
        expo = model.potential(pts) - float(model.potential(np.array([x] + [0.0] * (d - 1))))
        out[k] = special.logsumexp(expo, b=weight)
    return out


def gamma_tilde(
    model: DiffusionModel,
    t: float,
    n_outer: int = 20_000,
    n_ball: int = 256,
    seed: int = 0,
) -> Estimate:
    """γ̃(t) = ∫ μ(dx)/μ(B(x, √t)).

    Exact on the torus; deterministic quadrature for radial models on R^d,
    where γ̃ = ∫ dx / ∫_{B(0,r)} exp(V(x+u) - V(x)) du reduces to a radial
    integral; Monte Carlo otherwise, excluding underflowing ball masses.
    """
    if not 0 < t <= 1:
        raise ValueError("t must lie in (0, 1]")
    r = math.sqrt(t)
    d = model.d
    if model.family == "torus":
        if d == 1:
            return Estimate(max(1.0, math.pi / r))
        frac = _ball_volume(d, r) / (2.0 * math.pi) ** d
        return Estimate(1.0 / frac)
    if model.family == "box":
        raise ValueError("γ̃ for the box is not provided")
    if _radial(model):
        # 1/I(|x|) decays only like exp(-|∇V| r), so integrate out to infinity
        if d == 1:
            def integrand(x):
                return math.exp(-_log_ball_integral(model, np.array([x]), r)[0])

            half = sum(integrate.quad(integrand, lo, hi, epsrel=1e-10, limit=400)[0] for lo, hi in ((0.0, 20.0), (20.0, np.inf)))
            return Estimate(2.0 * half, 0.0, {"method": "quadrature"})
        sphere = 2.0 * math.pi ** (d / 2.0) / special.gamma(d / 2.0)

        def radial(s):
            return math.exp(-_log_ball_integral(model, np.array([s]), r, n_nodes=128)[0]) * s ** (d - 1)

        val = sum(integrate.quad(radial, lo, hi, epsrel=1e-9, limit=400)[0] for lo, hi in ((0.0, 20.0), (20.0, np.inf)))
        return Estimate(float(sphere * val), 0.0, {"method": "quadrature"})
    return _gamma_tilde_mc(model, r, n_outer, n_ball, seed)


def _gamma_tilde_mc(model: DiffusionModel, r: float, n_outer: int, n_ball: int, seed: int) -> Estimate:
    """γ̃ = ∫ dx / I(x), I(x) = ∫_{B(0,r)} exp(V(x+u) - V(x)) du, by importance sampling.

    Drawing x from μ alone gives 1/μ(B) infinite variance (its second moment
    is ∫ μ/μ(B)² dx). The proposal is the defensive mixture ½μ + ½ Student-t,
    whose polynomial tails dominate 1/I, so the weights stay bounded.
    """
    d = model.d
    nu = 3.0
    rng = make_rng(seed, AUX, 2)
    pilot = model.sampler(2000, rng)
    center = pilot.mean(axis=0)
    scale = float(pilot.std(axis=0, ddof=1).mean()) * 2.0
    tdist = stats.multivariate_t(loc=center, shape=scale**2 * np.eye(d), df=nu)
    from_mu = rng.random(n_outer) < 0.5
    n_mu = int(from_mu.sum())
    xs = np.empty((n_outer, d))
    xs[from_mu] = model.sampler(n_mu, rng)
    xs[~from_mu] = np.asarray(tdist.rvs(size=n_outer - n_mu, random_state=rng)).reshape(-1, d)
    log_mu = model.potential(xs) - math.log(model.normalizer)
    log_q = np.logaddexp(math.log(0.5) + log_mu, math.log(0.5) + np.atleast_1d(tdist.logpdf(xs)))
    vol = _ball_volume(d, r)
    g = rng.standard_normal((n_ball, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    u = g * (rng.random(n_ball) ** (1.0 / d))[:, None] * r
    v0 = model.potential(xs)
    log_i = np.array(
        [special.logsumexp(model.potential(x[None, :] + u) - v) for x, v in zip(xs, v0)]
    ) + math.log(vol / n_ball)
    log_w = -log_i - log_q
    bad = ~np.isfinite(log_w)
    w = np.exp(log_w[~bad])
    return Estimate(
        float(w.mean()),
        float(w.std(ddof=1) / math.sqrt(w.size)),
        {"method": "monte_carlo", "excluded": int(bad.sum()), "excluded_fraction": float(bad.mean())},
    )


def beta_tilde(gt: Callable[[float], float], eps: float) -> float:
    """β̃(ε) = 1 + ∫_ε^1 (t - ε) γ̃(t) dt."""
    return beta_fn(gt, eps)


# ---------------------------------------------------------------------------
# predicted exponents


@dataclass(frozen=True)
class ExponentPrediction:
    upper: float
    log_factor: bool
    lower: float


def rate_exponent_prediction(d: int, p: float) -> ExponentPrediction:
    """Exponent θ in E W2(μ_t, μ)² ≲ t^{-θ} for V = -κ|x|^p on R^d, and the lower one."""
    if d < 1 or not p > 1:
        raise ValueError("need d >= 1 and p > 1")
    lhs, rhs = 4.0 * (p - 1.0), d * p
    lower = 2.0 / max(2.0, d - 2.0)
    if math.isclose(lhs, rhs, rel_tol=1e-12, abs_tol=1e-12):
        return ExponentPrediction(1.0, True, lower)
    if lhs < rhs:
        return ExponentPrediction(2.0 * (p - 1.0) / ((d - 2.0) * p + 2.0), False, lower)
    return ExponentPrediction(1.0, False, lower)


def compact_exponent_prediction(d: int) -> ExponentPrediction:
    """Compact manifolds: t^{-1} for d ≤ 3, t^{-1} log t at d = 4, t^{-2/(d-2)} beyond."""
    if d < 1:
        raise ValueError("need d >= 1")
    lower = 2.0 / max(2.0, d - 2.0)
    if d <= 3:
        return ExponentPrediction(1.0, False, lower)
    if d == 4:
        return ExponentPrediction(1.0, True, lower)
    return ExponentPrediction(2.0 / (d - 2.0), False, lower)


# ---------------------------------------------------------------------------
# spectral sums


@dataclass(frozen=True)
class SpectralSum:
    value: float
    error: float
    certified: bool


def spectral_sum(source: Union[SpectralBasis, DiffusionModel], c: float = 2.0, tol: float = 1e-8) -> SpectralSum:
    """Σ_i c/λ_i² over the whole spectrum with an integral-test error bound."""
    if isinstance(source, DiffusionModel):
        family, d = source.family, source.d
    else:
        family, d = source.family, source.d
    if family == "ou":
        if d > 1:
            raise NonSummableSpectrum("OU multiplicities grow like n^{d-1}; Σ 1/λ² diverges for d >= 2")
        # Σ_{i≤N} c/i² plus a tail in [c/(N+1), c/N]
        N = int(math.ceil(math.sqrt(c / tol))) + 1
        i = np.arange(1, N + 1, dtype=float)
        partial = float(np.sum(c / (i * i)[::-1]))
        lo, hi = c / (N + 1), c / N
        return SpectralSum(partial + 0.5 * (lo + hi), 0.5 * (hi - lo), True)
    if family == "torus":
        if d >= 4:
            raise NonSummableSpectrum("lattice counts grow like n^{d/2-1}; Σ 1/λ² diverges for d >= 4")
        if d == 1:
            # each k² appears twice: Σ 2c/k⁴, tail in [2c/(3(N+1)³), 2c/(3N³)]
            # half-width c/(3N³) - c/(3(N+1)³) ≈ c/N⁴
            N = int(math.ceil((c / tol) ** 0.25)) + 2
            k = np.arange(1, N + 1, dtype=float)
            partial = float(np.sum((2.0 * c / k**4)[::-1]))
            lo, hi = 2.0 * c / (3.0 * (N + 1) ** 3), 2.0 * c / (3.0 * N**3)
            return SpectralSum(partial + 0.5 * (lo + hi), 0.5 * (hi - lo), True)
        n_max = 200_000
        counts = _torus_counts(d, n_max)
        n = np.arange(1, n_max + 1, dtype=float)
        partial = float(np.sum((c * counts[1:] / n**2)[::-1]))
        # lattice-point density (d/2) V_d n^{d/2-1}
        vd = _ball_volume(d, 1.0)
        tail = c * (d / 2.0) * vd * n_max ** (d / 2.0 - 2.0) / (2.0 - d / 2.0)
        return SpectralSum(partial + tail, abs(tail) * 0.01 + 1e-6, False)
    raise NonSummableSpectrum(f"no closed-form spectrum for family {family!r}")


# ---------------------------------------------------------------------------
# ξ variance


def xi_variance_exact(lam, t):
    """Stationary Var ξ(t) for an eigen-mode: 2/(λt) - 2(1 - exp(-λt))/(λt)²."""
    lam = np.asarray(lam, float)
    t = np.asarray(t, float)
    x = lam * t
    small = x < 1e-3
    xs = np.where(small, 1.0, x)
    big = (2.0 / xs) * (1.0 + np.expm1(-xs) / xs)
    series = 1.0 - x / 3.0 + x * x / 12.0 - x**3 / 60.0 + x**4 / 360.0
    out = np.where(small, series, big)
    return out if out.ndim else float(out)


def xi_variance_imm(coeffs, lams, t: float) -> float:
    """Var of (1/t)∫_0^t f(X_s) ds for f = Σ c_i φ_i under stationarity.

    (4/t²) ∫_0^{t/2} (t - 2s) Σ c_i² exp(-2 λ_i s) ds, by adaptive quadrature.
    """
    c2 = np.asarray(coeffs, float) ** 2
    lams = np.asarray(lams, float)

    def integrand(s):
        return (t - 2.0 * s) * float(np.sum(c2 * np.exp(-2.0 * lams * s)))

    val, _ = integrate.quad(integrand, 0.0, t / 2.0, epsabs=0.0, epsrel=1e-13, limit=400)
    return 4.0 * val / (t * t)


# ---------------------------------------------------------------------------
# rate fits


@dataclass(frozen=True)
class RateReport:
    horizons: np.ndarray
    values: np.ndarray
    stderrs: Optional[np.ndarray]
    slope: float
    intercept: float
    ci: tuple
    predicted: Optional[float]
    log_factor: bool
    tol: float
    verdict: Optional[bool]

    def to_record(self) -> dict:
        return {
            "horizons": [float(v) for v in self.horizons],
            "values": [float(v) for v in self.values],
            "stderrs": None if self.stderrs is None else [float(v) for v in self.stderrs],
            "slope": self.slope,
            "intercept": self.intercept,
            "ci95": [float(self.ci[0]), float(self.ci[1])],
            "predicted_slope": self.predicted,
            "log_factor": self.log_factor,
            "tol": self.tol,
            "verdict": self.verdict,
        }


def fit_rate(
    horizons: Sequence[float],
    values: Sequence[float],
    stderrs: Optional[Sequence[float]] = None,
    predicted: Optional[float] = None,
    log_factor: bool = False,
    tol: float = 0.0,
    weighted: bool = True,
) -> RateReport:
    """Weighted least squares of log(value) on log(t) with a 95% t-interval.

    With ``log_factor`` the values are divided by log t first, so that a
    prediction t^{-θ} log t is tested as slope -θ. ``predicted`` is the
    predicted slope (negative for decay).
    """
    t = np.asarray(horizons, float)
    v = np.asarray(values, float)
    K = t.size
    if K < 3:
        raise ValueError("need at least three horizons")
    if np.any(v <= 0):
        raise ValueError("values must be positive")
    if np.any(np.diff(t) <= 0):
        raise ValueError("horizons must be strictly increasing")
    y = np.log(v)
    if log_factor:
        if np.any(t <= 1):
            raise ValueError("log factor needs t > 1")
        y = y - np.log(np.log(t))
    x = np.log(t)
    if stderrs is not None and weighted:
        se = np.asarray(stderrs, float)
        rel = se / v
        w = np.where(rel > 0, 1.0 / np.maximum(rel, 1e-300) ** 2, 1.0)
        if np.all(rel <= 0):
            w = np.ones(K)
    else:
        w = np.ones(K)
    w = w / w.sum()
    xm, ym = np.dot(w, x), np.dot(w, y)
    sxx = float(np.dot(w, (x - xm) ** 2))
    slope = float(np.dot(w, (x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    # weighted residual variance, rescaled to the effective sample size
    s2 = float(np.dot(w, resid**2)) * K / (K - 2)
    se_slope = math.sqrt(max(s2 / (K * sxx), 0.0))
    q = float(stats.t.ppf(0.975, K - 2))
    ci = (slope - q * se_slope, slope + q * se_slope)
    verdict = None
    if predicted is not None:
        verdict = bool(ci[0] - tol <= predicted <= ci[1] + tol)
    return RateReport(
        t, v, None if stderrs is None else np.asarray(stderrs, float), slope, intercept, ci, predicted, log_factor, tol, verdict
    )
