"""Exactly solvable diffusion models on flat state spaces.

A model bundles a state space (free Euclidean space, the flat torus of
period 2π, or a reflecting box), a potential ``V`` with invariant measure
``μ ∝ exp(V)``, a sampler for ``μ`` and, where a closed form exists, the
eigen-decomposition of ``-L`` with ``L = Δ + ∇V·∇``.

States are numpy arrays whose last axis is the dimension ``d``; every
evaluator broadcasts over leading axes.
"""

from __future__ import annotations

import itertools
import math
import re
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

from .rng import make_rng

TWO_PI = 2.0 * np.pi


class NoClosedFormSpectrum(ValueError):
    """The model has no exactly known eigen-decomposition."""


class SamplerFailure(RuntimeError):
    """Rejection sampling did not produce enough draws."""


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class DomainSpec:
    kind: str  # "free" | "torus" | "box"
    d: int
    period: float = TWO_PI
    bounds: Optional[tuple] = None  # ((lo, hi), ...) for "box"

    def __post_init__(self):
        if self.kind not in ("free", "torus", "box"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError("dimension must be a positive integer")
        if self.kind == "torus" and not self.period > 0:
            raise ValueError("torus period must be positive")
        if self.kind == "box":
            if self.bounds is None or len(self.bounds) != self.d:
                raise ValueError("box needs one (lo, hi) pair per dimension")
            if any(not hi > lo for lo, hi in self.bounds):
                raise ValueError("box bounds must have positive volume")

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds], dtype=float)

    def displacement(self, x, y) -> np.ndarray:
        """Coordinate-wise shortest displacement magnitudes |x - y|."""
        diff = np.abs(np.asarray(x, float) - np.asarray(y, float))
        if self.kind == "torus":
            diff = np.mod(diff, self.period)
            diff = np.minimum(diff, self.period - diff)
        return diff

    def metric(self, x, y) -> np.ndarray:
        diff = self.displacement(x, y)
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def pairwise_sq(self, x, y) -> np.ndarray:
        """Matrix of squared distances between point sets of shape (n, d), (m, d)."""
        x = np.asarray(x, float).reshape(-1, self.d)
        y = np.asarray(y, float).reshape(-1, self.d)
        if self.kind != "torus":
            # expanded form is fast but can go slightly negative
            sq = (
                np.sum(x * x, axis=1)[:, None]
                + np.sum(y * y, axis=1)[None, :]
                - 2.0 * x @ y.T
            )
            if self.d == 1:
                sq = (x[:, 0][:, None] - y[:, 0][None, :]) ** 2
            return np.maximum(sq, 0.0)
        out = np.zeros((x.shape[0], y.shape[0]))
        for j in range(self.d):
            diff = np.abs(x[:, j][:, None] - y[:, j][None, :])
            diff = np.minimum(diff, self.period - diff)
            out += diff * diff
        return out

    def wrap(self, x) -> np.ndarray:
        """Map states back into the domain (torus wrap / box mirror fold)."""
        x = np.asarray(x, float)
        if self.kind == "torus":
            x = np.mod(x, self.period)
            # mod can round up to the period itself
            return np.where(x >= self.period, 0.0, x)
        if self.kind == "box":
            lo, hi = self.lower, self.upper
            width = hi - lo
            r = np.mod(x - lo, 2.0 * width)
            return lo + np.where(r > width, 2.0 * width - r, r)
        return x

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self.kind == "torus":
            return np.all((x >= 0) & (x < self.period), axis=-1)
        if self.kind == "box":
            return np.all((x >= self.lower) & (x <= self.upper), axis=-1)
        return np.all(np.isfinite(x), axis=-1)


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class Perturbation:
    """Lipschitz perturbation ``W`` of the power potential."""

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    grad_bound: float


def cosine_perturbation(amplitude: float, frequency: float = 1.0) -> Perturbation:
    """``W(x) = a Σ_j cos(ω x_j)``, a bounded smooth perturbation."""

    def value(x):
        return amplitude * np.sum(np.cos(frequency * np.asarray(x, float)), axis=-1)

    def grad(x):
        return -amplitude * frequency * np.sin(frequency * np.asarray(x, float))

    # |∇W| ≤ a ω √d; the dimension is only known at call time, so store a ω
    # and let the model scale it
    return Perturbation(value, grad, abs(amplitude * frequency))


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    name: str
    domain: DomainSpec
    potential: Callable[[np.ndarray], np.ndarray]
    grad_potential: Callable[[np.ndarray], np.ndarray]
    normalizer: float
    sampler: Callable[[int, np.random.Generator], np.ndarray]
    family: str  # "ou" | "torus" | "power" | "box"
    params: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.domain.d

    def log_density(self, x) -> np.ndarray:
        """log of the unnormalized density e^V."""
        return self.potential(x)

    def density(self, x) -> np.ndarray:
        return np.exp(self.potential(x)) / self.normalizer

    def grad_V(self, x) -> np.ndarray:
        return self.grad_potential(x)

    def drift(self, x) -> np.ndarray:
        return self.grad_potential(x)

    @property
    def has_spectrum(self) -> bool:
        return self.family in ("ou", "torus")

    def __repr__(self):
        return f"DiffusionModel({self.name!r})"


def _ou_sampler(d):
    def sample(n, rng):
        return rng.standard_normal((n, d))

    return sample


def ou_model(d: int = 1) -> DiffusionModel:
    """Ornstein-Uhlenbeck model: V(x) = -|x|²/2, μ = N(0, I_d)."""
    domain = DomainSpec("free", d)
    return DiffusionModel(
        name=f"ou-{d}d",
        domain=domain,
        potential=lambda x: -0.5 * np.sum(np.asarray(x, float) ** 2, axis=-1),
        grad_potential=lambda x: -np.asarray(x, float),
        normalizer=(2.0 * np.pi) ** (d / 2.0),
        sampler=_ou_sampler(d),
        family="ou",
    )


def torus_model(d: int = 1) -> DiffusionModel:
    """Brownian motion (generator Δ) on the flat torus [0, 2π)^d."""
    domain = DomainSpec("torus", d)

    def sample(n, rng):
        return rng.random((n, d)) * TWO_PI

    return DiffusionModel(
        name=f"torus-{d}d",
        domain=domain,
        potential=lambda x: np.zeros(np.shape(x)[:-1]),
        grad_potential=lambda x: np.zeros(np.shape(x)),
        normalizer=TWO_PI**d,
        sampler=sample,
        family="torus",
    )


def box_model(bounds) -> DiffusionModel:
    """Reflected Brownian motion in a box, μ uniform."""
    bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
    d = len(bounds)
    domain = DomainSpec("box", d, bounds=bounds)
    lo, hi = domain.lower, domain.upper

    def sample(n, rng):
        return lo + rng.random((n, d)) * (hi - lo)

    return DiffusionModel(
        name="box-" + "x".join(f"{a:g}:{b:g}" for a, b in bounds),
        domain=domain,
        potential=lambda x: np.zeros(np.shape(x)[:-1]),
        grad_potential=lambda x: np.zeros(np.shape(x)),
        normalizer=float(np.prod(hi - lo)),
        sampler=sample,
        family="box",
    )


def _radial_power_sampler(d, kappa, p):
    """Exact draws from the density ∝ exp(-κ|x|^p): κ|X|^p ~ Gamma(d/p)."""

    def sample(n, rng):
        g = rng.standard_gamma(d / p, size=n)
        r = (g / kappa) ** (1.0 / p)
        if d == 1:
            sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
            return (sign * r)[:, None]
        direction = rng.standard_normal((n, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        return direction * r[:, None]

    return sample


def _power_normalizer_unperturbed(d, kappa, p):
    sphere = 2.0 * np.pi ** (d / 2.0) / special.gamma(d / 2.0)
    return sphere * special.gamma(d / p) / (p * kappa ** (d / p))


def power_model(
    d: int = 1,
    kappa: float = 1.0,
    p: float = 2.0,
    W: Optional[Perturbation] = None,
    *,
    max_attempts: int = 200,
) -> DiffusionModel:
    """Power potential V(x) = -κ|x|^p + W(x) on R^d.

    The gradient is set to zero at the origin, where it is singular for p < 2.
    """
    if not p > 1:
        raise ValueError("power model needs p > 1")
    if not kappa > 0:
        raise ValueError("power model needs κ > 0")
    d = int(d)
    domain = DomainSpec("free", d)

    def norm(x):
        return np.sqrt(np.sum(np.asarray(x, float) ** 2, axis=-1))

    def V(x):
        v = -kappa * norm(x) ** p
        if W is not None:
            v = v + W.value(x)
        return v

    def grad_V(x):
        x = np.asarray(x, float)
        r = norm(x)
        safe = np.where(r > 0, r, 1.0)
        coef = np.where(r > 0, kappa * p * safe ** (p - 2.0), 0.0)
        g = -coef[..., None] * x
        if W is not None:
            g = g + W.grad(x)
        return g

    base = _radial_power_sampler(d, kappa, p)
    if W is None:
        Z = _power_normalizer_unperturbed(d, kappa, p)
        sampler = base
    else:
        grad_bound = W.grad_bound * math.sqrt(d)
        # envelope ∝ exp(-κ/2 |x|^p); log C bounds W(x) - κ/2 |x|^p
        half = kappa / 2.0
        w0 = float(W.value(np.zeros(d)))
        if grad_bound > 0:
            r_star = (grad_bound / (half * p)) ** (1.0 / (p - 1.0))
            log_c = w0 + grad_bound * r_star - half * r_star**p
        else:
            log_c = w0
        log_c = max(log_c, w0)
        _check_envelope(W, d, half, p, log_c)
        env = _radial_power_sampler(d, half, p)

        def sampler(n, rng):
            out = np.empty((0, d))
            for _ in range(max_attempts):
                need = n - out.shape[0]
                if need <= 0:
                    break
                cand = env(max(2 * need, 64), rng)
                r = norm(cand)
                log_acc = -half * r**p + W.value(cand) - log_c
                keep = np.log(rng.random(cand.shape[0])) < log_acc
                out = np.concatenate([out, cand[keep]])
            if out.shape[0] < n:
                raise SamplerFailure(
                    f"rejection sampler produced {out.shape[0]} of {n} draws; "
                    "the envelope is too loose"
                )
            return out[:n]

        if d == 1:
            Z = integrate.quad(lambda s: np.exp(V(np.array([s]))), -np.inf, np.inf, limit=400)[0]
        else:
            # importance estimate against the unperturbed law
            rng = make_rng(0x5EED)
            draws = base(200_000, rng)
            Z = _power_normalizer_unperturbed(d, kappa, p) * float(np.mean(np.exp(W.value(draws))))

    return DiffusionModel(
        name=f"power-d{d}-k{kappa:g}-p{p:g}" + ("" if W is None else "-W"),
        domain=domain,
        potential=V,
        grad_potential=grad_V,
        normalizer=float(Z),
        sampler=sampler,
        family="power",
        params={"kappa": kappa, "p": p, "W": W},
    )


def _check_envelope(W, d, half, p, log_c):
    rng = make_rng(0xE1)
    dirs = rng.standard_normal((64, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = np.concatenate([np.linspace(0.0, 10.0, 201), np.geomspace(10.0, 1e3, 50)])
    pts = radii[:, None, None] * dirs[None, :, :]
    excess = W.value(pts) - half * radii[:, None] ** p - log_c
    if np.max(excess) > 1e-9:
        raise SamplerFailure("rejection envelope does not dominate exp(V)")


_MODEL_ID = re.compile(
    r"^(?:(?P<fam>ou|torus)-(?P<d>\d+)d|power-d(?P<pd>\d+)-k(?P<k>[0-9.eE+-]+)-p(?P<p>[0-9.eE+-]+))$"
)


def model_from_id(model_id: str) -> DiffusionModel:
    """Resolve catalogue identifiers such as "ou-1d", "torus-3d", "power-d2-k1-p4"."""
    m = _MODEL_ID.match(model_id.strip())
    if m is None:
        raise ValueError(f"unknown model id {model_id!r}")
    if m.group("fam") == "ou":
        return ou_model(int(m.group("d")))
    if m.group("fam") == "torus":
        return torus_model(int(m.group("d")))
    return power_model(int(m.group("pd")), float(m.group("k")), float(m.group("p")))


def sample_mu(model: DiffusionModel, n: int, seed) -> np.ndarray:
    """i.i.d. draws from the invariant measure, shape (n, d)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return model.sampler(int(n), make_rng(seed))


# ---------------------------------------------------------------------------
# spectra


def _hermite_table(x, n_max):
    """Normalized probabilists' Hermite values He_k(x)/sqrt(k!), k = 0..n_max."""
    x = np.asarray(x, float)
    out = np.empty(x.shape + (n_max + 1,))
    out[..., 0] = 1.0
    if n_max >= 1:
        out[..., 1] = x
    for k in range(1, n_max):
        out[..., k + 1] = (x * out[..., k] - math.sqrt(k) * out[..., k - 1]) / math.sqrt(k + 1)
    return out


@lru_cache(maxsize=32)
def _torus_counts(d, n_max):
    """r_d(n): number of k in Z^d with |k|² = n, for n = 0..n_max."""
    r1 = np.zeros(n_max + 1)
    r1[0] = 1
    k = 1
    while k * k <= n_max:
        r1[k * k] = 2
        k += 1
    out = r1.copy()
    for _ in range(d - 1):
        out = np.rint(np.convolve(out, r1)[: n_max + 1])
    out.setflags(write=False)
    return out


def _jacobi_theta(t):
    """Σ_{k∈Z} exp(-k² t)."""
    if t >= 1.0:
        k = np.arange(1, int(math.sqrt(50.0 / t)) + 2)
        return 1.0 + 2.0 * float(np.sum(np.exp(-k * k * t)))
    k = np.arange(1, int(math.sqrt(50.0 * t)) / math.pi + 3)
    return math.sqrt(math.pi / t) * (1.0 + 2.0 * float(np.sum(np.exp(-(math.pi**2) * k * k / t))))


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """First ``N`` nonzero eigenpairs of -L for an OU or torus model.

    ``index`` holds Hermite multi-indices (OU) or wave vectors (torus);
    ``phase`` is 0 for cosine and 1 for sine modes on the torus.
    """

    family: str
    d: int
    eigenvalues: np.ndarray
    index: np.ndarray
    phase: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return int(self.eigenvalues.shape[0])

    @property
    def gap(self) -> float:
        return float(self.eigenvalues[0])

    def __len__(self):
        return self.n

    def __call__(self, x) -> np.ndarray:
        """Evaluate all eigenfunctions: shape (..., N)."""
        x = np.asarray(x, float)
        if self.family == "ou":
            table = _hermite_table(x, int(self.index.max()))  # (..., d, K)
            out = np.ones(x.shape[:-1] + (self.n,))
            for j in range(self.d):
                out = out * table[..., j, :][..., self.index[:, j]]
            return out
        theta = x @ self.index.T.astype(float)
        return math.sqrt(2.0) * np.where(self.phase == 0, np.cos(theta), np.sin(theta))

    def grad(self, x) -> np.ndarray:
        """Gradients of all eigenfunctions: shape (..., N, d)."""
        x = np.asarray(x, float)
        if self.family == "ou":
            table = _hermite_table(x, int(self.index.max()))
            vals = [table[..., j, :][..., self.index[:, j]] for j in range(self.d)]
            lower = [
                table[..., j, :][..., np.maximum(self.index[:, j] - 1, 0)]
                * np.sqrt(self.index[:, j])
                for j in range(self.d)
            ]
            out = np.empty(x.shape[:-1] + (self.n, self.d))
            for j in range(self.d):
                g = lower[j]
                for k in range(self.d):
                    if k != j:
                        g = g * vals[k]
                out[..., j] = g
            return out
        theta = x @ self.index.T.astype(float)
        dphi = math.sqrt(2.0) * np.where(self.phase == 0, -np.sin(theta), np.cos(theta))
        return dphi[..., None] * self.index.astype(float)

    # -- traces ------------------------------------------------------------

    def full_trace(self, t: float) -> float:
        """Σ over all nonzero eigenvalues of exp(-λ t), in closed form."""
        if self.family == "ou":
            return float((-np.expm1(-t)) ** (-self.d) - 1.0)
        return _jacobi_theta(t) ** self.d - 1.0

    def level_multiplicity(self, levels: np.ndarray) -> np.ndarray:
        levels = np.asarray(levels, dtype=np.int64)
        if self.family == "ou":
            return np.array([math.comb(int(n) + self.d - 1, self.d - 1) for n in levels], float)
        counts = _torus_counts(self.d, int(levels.max()))
        return counts[levels]

    def trace_tail(self, t: float) -> float:
        """Σ over eigenvalues not in the basis of exp(-λ t)."""
        lam_top = float(self.eigenvalues[-1])
        if math.exp(-lam_top * t) > 1e-8:
            partial = float(np.sum(np.exp(-self.eigenvalues * t)))
            return max(self.full_trace(t) - partial, 0.0)
        top = int(round(lam_top))
        n_extra = int(60.0 / t) + 5
        levels = np.arange(top, top + n_extra)
        mult = self.level_multiplicity(levels)
        mult[0] -= np.count_nonzero(np.isclose(self.eigenvalues, top))
        return float(np.sum(mult * np.exp(-levels * t)))


def _ou_indices(d, N):
    out = []
    level = 1
    while len(out) < N:
        combos = [c for c in itertools.product(range(level + 1), repeat=d) if sum(c) == level]
        combos.sort(reverse=True)
        out.extend(combos)
        level += 1
    return np.array(out[:N], dtype=np.int64)


def _torus_indices(d, N):
    radius = 1
    while True:
        rng_ = range(-radius, radius + 1)
        ks = [k for k in itertools.product(rng_, repeat=d) if any(k)]
        # one representative per ±k pair: first nonzero coordinate positive
        ks = [k for k in ks if next(c for c in k if c != 0) > 0]
        ks.sort(key=lambda k: (sum(c * c for c in k), tuple(-c for c in k)))
        complete = [k for k in ks if sum(c * c for c in k) <= radius * radius]
        if 2 * len(complete) >= N:
            break
        radius += 1
    modes, phases = [], []
    for k in complete:
        modes.extend([k, k])
        phases.extend([0, 1])
    return np.array(modes[:N], dtype=np.int64), np.array(phases[:N], dtype=np.int64)


def eigen_pairs(model: DiffusionModel, N: int) -> SpectralBasis:
    """First ``N`` nonzero eigenvalues (ascending, with multiplicity) and eigenfunctions."""
    if N < 1:
        raise ValueError("truncation N must be positive")
    if model.family == "ou":
        idx = _ou_indices(model.d, N)
        return SpectralBasis("ou", model.d, idx.sum(axis=1).astype(float), idx)
    if model.family == "torus":
        if not np.isclose(model.domain.period, TWO_PI):
            raise NoClosedFormSpectrum("torus spectra are tabulated for period 2π only")
        idx, phase = _torus_indices(model.d, N)
        return SpectralBasis("torus", model.d, np.sum(idx * idx, axis=1).astype(float), idx, phase)
    if model.family == "power" and model.params.get("W") is None and model.params.get("p") == 2.0:
        raise NoClosedFormSpectrum(
            "power model with p = 2 is a rescaled OU process; use ou_model for κ = 1/2"
        )
    raise NoClosedFormSpectrum(f"no closed-form spectrum for {model.name}")


def default_truncation(model: DiffusionModel, t_min: float, tol: float = 1e-10) -> int:
    """Smallest N with exp(-λ_N t_min) < tol."""
    lam_needed = math.log(1.0 / tol) / t_min
    if model.family == "ou":
        levels = np.arange(1, int(lam_needed) + 2)
        mult = [math.comb(int(n) + model.d - 1, model.d - 1) for n in levels]
        count = 0
        for n, m in zip(levels, mult):
            count += m
            if n > lam_needed:
                return count - m + 1
        return count
    if model.family == "torus":
        n_max = int(lam_needed) + 1
        counts = _torus_counts(model.d, n_max)
        return int(np.sum(counts[1 : n_max + 1])) + 1 if counts[n_max] == 0 else int(np.sum(counts[1:n_max])) + 1
    raise NoClosedFormSpectrum(f"no closed-form spectrum for {model.name}")


@dataclass(frozen=True)
class HeatKernelValue:
    value: float
    tail: float


def heat_kernel(basis: SpectralBasis, t: float, x, y) -> HeatKernelValue:
    """Truncated p_t(x, y) = 1 + Σ exp(-λ_i t) φ_i(x) φ_i(y) with a tail estimate."""
    if not t > 0:
        raise ValueError("t must be positive")
    phx = basis(np.asarray(x, float))
    phy = basis(np.asarray(y, float))
    weights = np.exp(-basis.eigenvalues * t)
    value = 1.0 + np.sum(weights * phx * phy, axis=-1)
    scale = max(1.0, float(np.max(np.abs(phx[..., -1] * phy[..., -1]))))
    tail = basis.trace_tail(t) * scale
    if tail > 1e-6:
        warnings.warn(f"heat kernel truncation tail {tail:.2e} exceeds 1e-6", RuntimeWarning)
    return HeatKernelValue(value=value if np.ndim(value) else float(value), tail=float(tail))


def mehler_kernel(t: float, x, y) -> np.ndarray:
    """Closed-form 1-D OU heat kernel against N(0, 1)."""
    r = math.exp(-t)
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    return (1.0 - r * r) ** -0.5 * np.exp((2 * r * x * y - r * r * (x * x + y * y)) / (2.0 * (1.0 - r * r)))


# ---------------------------------------------------------------------------
# initial distributions


@dataclass(frozen=True, eq=False)
class InitialDistribution:
    kind: str  # "dirac" | "stationary" | "density_bounded"
    x0: Optional[np.ndarray] = None
    k: Optional[float] = None
    sampler: Optional[Callable] = None

    def draw(self, model: DiffusionModel, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "dirac":
            return np.broadcast_to(np.asarray(self.x0, float), (model.d,)).copy()
        if self.kind == "stationary":
            return model.sampler(1, rng)[0]
        return np.asarray(self.sampler(1, rng), float).reshape(model.d)


def dirac(x0) -> InitialDistribution:
    return InitialDistribution("dirac", x0=np.atleast_1d(np.asarray(x0, float)))


def stationary() -> InitialDistribution:
    return InitialDistribution("stationary")


def density_bounded(model: DiffusionModel, h: Callable, k: float) -> InitialDistribution:
    """ν = h μ with ‖h‖_∞ ≤ k, sampled by rejection from μ."""
    if k < 1:
        raise ValueError("k must be at least 1")

    def sample(n, rng):
        out = np.empty((0, model.d))
        for _ in range(10_000):
            cand = model.sampler(max(4 * n, 16), rng)
            hv = np.asarray(h(cand), float)
            if np.any(hv > k + 1e-12) or np.any(hv < 0):
                raise ValueError("density h violates 0 ≤ h ≤ k")
            keep = rng.random(cand.shape[0]) * k < hv
            out = np.concatenate([out, cand[keep]])
            if out.shape[0] >= n:
                return out[:n]
        raise SamplerFailure("density_bounded sampler failed")

    return InitialDistribution("density_bounded", k=float(k), sampler=sample)
