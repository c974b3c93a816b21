import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.polynomial import hermite_e
from scipy import integrate, special

from eol.models import (
    DomainSpec,
    NoClosedFormSpectrum,
    SamplerFailure,
    box_model,
    cosine_perturbation,
    default_truncation,
    density_bounded,
    eigen_pairs,
    heat_kernel,
    mehler_kernel,
    model_from_id,
    ou_model,
    power_model,
    sample_mu,
    torus_model,
)
from eol.rng import make_rng

TWO_PI = 2 * math.pi


def gauss_hermite(n=120):
    x, w = hermite_e.hermegauss(n)
    return x, w / math.sqrt(2 * math.pi)


# -- domains ---------------------------------------------------------------


def test_domain_validation():
    with pytest.raises(ValueError):
        DomainSpec("free", 0)
    with pytest.raises(ValueError):
        DomainSpec("torus", 1, period=0.0)
    with pytest.raises(ValueError):
        DomainSpec("box", 1, bounds=((1.0, 1.0),))
    with pytest.raises(ValueError):
        DomainSpec("sphere", 2)


def test_torus_wrap_metric():
    dom = DomainSpec("torus", 1)
    assert dom.metric(np.array([0.1]), np.array([TWO_PI - 0.1])) == pytest.approx(0.2)


DOMAINS = [DomainSpec("free", 3), DomainSpec("torus", 3), DomainSpec("box", 3, bounds=((0, 1), (-1, 2), (0, 5)))]


@pytest.mark.parametrize("dom", DOMAINS, ids=lambda d: d.kind)
def test_metric_axioms_random_triples(dom):
    rng = make_rng(11)
    x, y, z = (dom.wrap(rng.uniform(-10, 10, (1000, 3))) for _ in range(3))
    dxy, dyz, dxz = dom.metric(x, y), dom.metric(y, z), dom.metric(x, z)
    assert np.allclose(dxy, dom.metric(y, x), atol=0, rtol=0)
    assert np.all(dxz <= dxy + dyz + 1e-12)
    assert np.all(dom.metric(x, x) == 0)
    assert np.all(dxy > 0)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=2))
def test_box_wrap_lands_inside(xs):
    dom = DomainSpec("box", 2, bounds=((0.0, 1.0), (-2.0, 3.0)))
    assert dom.contains(dom.wrap(np.array(xs)))


@given(st.floats(-1e3, 1e3))
def test_torus_wrap_lands_inside(x):
    dom = DomainSpec("torus", 1)
    y = dom.wrap(np.array([x]))
    assert dom.contains(y)
    assert dom.metric(y, np.array([x])) < 1e-9


def test_pairwise_sq_matches_metric():
    rng = make_rng(3)
    for dom in DOMAINS:
        x, y = dom.wrap(rng.uniform(-5, 5, (7, 3))), dom.wrap(rng.uniform(-5, 5, (9, 3)))
        brute = dom.metric(x[:, None, :], y[None, :, :]) ** 2
        assert np.allclose(dom.pairwise_sq(x, y), brute, atol=1e-10)


# -- models -----------------------------------------------------------------


def test_ou_definition():
    m = ou_model(1)
    assert m.grad_V(np.array([2.0]))[0] == -2.0
    x, w = gauss_hermite()
    assert np.dot(w, x * x) == pytest.approx(1.0)
    assert m.density(np.array([[0.0]]))[0] == pytest.approx(1 / math.sqrt(2 * math.pi))


def test_power_examples():
    m = power_model(1, 1.0, 4.0)
    assert m.grad_V(np.array([1.0]))[0] == pytest.approx(-4.0)
    m2 = power_model(2, 1.0, 1.5)
    assert np.all(m2.grad_V(np.zeros(2)) == 0.0)
    with pytest.raises(ValueError):
        power_model(1, 1.0, 1.0)
    with pytest.raises(ValueError):
        power_model(1, 0.0, 2.0)


def test_power_half_is_ou():
    p, o = power_model(1, 0.5, 2.0), ou_model(1)
    x = np.linspace(-4, 4, 17)[:, None]
    assert np.allclose(p.density(x), o.density(x), rtol=1e-12)
    assert np.allclose(p.grad_V(x), o.grad_V(x))


@pytest.mark.parametrize("d,kappa,p", [(1, 1.0, 4.0), (1, 2.0, 1.5), (2, 1.0, 3.0), (3, 0.5, 2.5)])
def test_power_normalizer_by_quadrature(d, kappa, p):
    m = power_model(d, kappa, p)
    sphere = 2 * math.pi ** (d / 2) / special.gamma(d / 2)
    radial = integrate.quad(lambda r: math.exp(-kappa * r**p) * r ** (d - 1), 0, np.inf)[0]
    assert m.normalizer == pytest.approx(sphere * radial, rel=1e-10)


def test_perturbed_power_normalizer_1d():
    W = cosine_perturbation(0.5)
    m = power_model(1, 1.0, 2.0, W)
    z = integrate.quad(lambda x: math.exp(-(x**2) + 0.5 * math.cos(x)), -np.inf, np.inf)[0]
    assert m.normalizer == pytest.approx(z, rel=1e-9)


MODELS = {
    "ou-2d": ou_model(2),
    "torus-2d": torus_model(2),
    "power-d1-p4": power_model(1, 1.0, 4.0),
    "power-d3-p1.5": power_model(3, 1.0, 1.5),
    "power-d2-W": power_model(2, 1.0, 3.0, cosine_perturbation(0.3, 2.0)),
}


@pytest.mark.parametrize("name", sorted(MODELS))
def test_grad_matches_finite_differences(name):
    m = MODELS[name]
    rng = make_rng(5)
    pts = rng.uniform(-2, 2, (100, m.d))
    pts = pts[np.linalg.norm(pts, axis=1) > 0.1]
    h = 1e-5
    fd = np.stack([(m.potential(pts + h * e) - m.potential(pts - h * e)) / (2 * h) for e in np.eye(m.d)], axis=-1)
    g = m.grad_V(pts)
    scale = np.maximum(np.abs(g), 1.0)
    assert np.max(np.abs(fd - g) / scale) < 1e-6


def test_model_catalogue():
    assert model_from_id("ou-1d").family == "ou"
    assert model_from_id("torus-3d").d == 3
    m = model_from_id("power-d2-k1-p4")
    assert (m.d, m.params["kappa"], m.params["p"]) == (2, 1.0, 4.0)
    with pytest.raises(ValueError):
        model_from_id("sphere-2d")


def test_box_model_uniform():
    m = box_model([(0, 2), (1, 4)])
    x = sample_mu(m, 5000, 1)
    assert np.all(m.domain.contains(x))
    assert m.density(x[:3]) == pytest.approx(np.full(3, 1 / 6))


# -- spectra ------------------------------------------------------------------


def test_ou_1d_eigenpairs():
    b = eigen_pairs(ou_model(1), 3)
    assert list(b.eigenvalues) == [1.0, 2.0, 3.0]
    x = np.linspace(-3, 3, 13)[:, None]
    phi = b(x)
    assert np.allclose(phi[:, 0], x[:, 0])
    assert np.allclose(phi[:, 1], (x[:, 0] ** 2 - 1) / math.sqrt(2))
    assert b(np.array([[0.5]]))[0, 1] == pytest.approx(-0.5303300858899106)


@pytest.mark.parametrize("model", [ou_model(1), ou_model(2)], ids=["ou1", "ou2"])
def test_ou_orthonormality(model):
    b = eigen_pairs(model, 10)
    x, w = gauss_hermite()
    if model.d == 1:
        pts, wts = x[:, None], w
    else:
        X, Y = np.meshgrid(x, x, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
        wts = np.outer(w, w).ravel()
    phi = b(pts)
    gram = phi.T @ (wts[:, None] * phi)
    assert np.allclose(gram, np.eye(10), atol=1e-6)
    assert np.allclose(wts @ phi, 0, atol=1e-6)


def test_ou_2d_spectrum():
    b = eigen_pairs(ou_model(2), 6)
    assert list(b.eigenvalues) == [1, 1, 2, 2, 2, 3]


def test_ou_2d_generator_finite_differences():
    # -L φ = -Δφ + x·∇φ must equal λ φ
    b = eigen_pairs(ou_model(2), 10)
    rng = make_rng(2)
    pts = rng.uniform(-2, 2, (20, 2))
    h = 1e-3
    lap = sum((b(pts + h * e) - 2 * b(pts) + b(pts - h * e)) / h**2 for e in np.eye(2))
    grad = np.stack([(b(pts + h * e) - b(pts - h * e)) / (2 * h) for e in np.eye(2)], axis=-1)
    minus_L = -lap + np.einsum("nd,nkd->nk", pts, grad)
    assert np.allclose(minus_L, b(pts) * b.eigenvalues, atol=1e-4 * np.max(np.abs(b(pts))))


@pytest.mark.parametrize("model", [ou_model(1), torus_model(1)], ids=["ou", "torus"])
def test_1d_eigen_relation(model):
    b = eigen_pairs(model, 6)
    x = np.linspace(0.3, 2.9, 27)[:, None]
    h = 1e-4
    lap = (b(x + h) - 2 * b(x) + b(x - h)) / h**2
    drift = model.grad_V(x)[:, 0][:, None] * b.grad(x)[..., 0]
    minus_L = -(lap + drift)
    target = b.eigenvalues * b(x)
    mask = np.abs(target) > 1e-2
    assert np.max(np.abs(minus_L - target)[mask] / np.abs(target)[mask]) < 1e-5


def test_gradients_match_finite_differences():
    for model in (ou_model(2), torus_model(2)):
        b = eigen_pairs(model, 12)
        x = make_rng(8).uniform(-1.5, 1.5, (10, 2))
        h = 1e-6
        fd = np.stack([(b(x + h * e) - b(x - h * e)) / (2 * h) for e in np.eye(2)], axis=-1)
        assert np.allclose(b.grad(x), fd, atol=1e-6)


def test_torus_spectrum_and_orthonormality():
    b = eigen_pairs(torus_model(1), 4)
    assert list(b.eigenvalues) == [1, 1, 4, 4]
    b2 = eigen_pairs(torus_model(2), 12)
    assert np.all(np.diff(b2.eigenvalues) >= 0) and b2.gap == 1
    g = np.linspace(0, TWO_PI, 64, endpoint=False)
    X, Y = np.meshgrid(g, g, indexing="ij")
    phi = b2(np.stack([X.ravel(), Y.ravel()], axis=-1))
    gram = phi.T @ phi / phi.shape[0]
    assert np.allclose(gram, np.eye(12), atol=1e-10)


def test_no_closed_form_spectrum():
    with pytest.raises(NoClosedFormSpectrum):
        eigen_pairs(power_model(1, 1.0, 3.0), 1)


def test_default_truncation():
    # smallest N with exp(-λ_N t_min) < 1e-10
    n_ou = default_truncation(ou_model(1), 0.1)
    assert math.exp(-n_ou * 0.1) < 1e-10 <= math.exp(-(n_ou - 1) * 0.1)
    b = eigen_pairs(torus_model(1), default_truncation(torus_model(1), 0.1))
    assert math.exp(-b.eigenvalues[-1] * 0.1) < 1e-10


# -- heat kernel --------------------------------------------------------------


def test_heat_kernel_matches_mehler():
    b = eigen_pairs(ou_model(1), 80)
    for x, y in [(0.0, 0.0), (0.5, -1.0), (1.2, 0.7)]:
        hk = heat_kernel(b, 1.0, np.array([x]), np.array([y]))
        assert hk.value == pytest.approx(float(mehler_kernel(1.0, x, y)), abs=1e-10)


@pytest.mark.filterwarnings("ignore:heat kernel truncation")  # far Gauss-Hermite nodes
def test_heat_kernel_symmetric_and_normalized():
    b = eigen_pairs(ou_model(1), 60)
    x, w = gauss_hermite()
    vals = heat_kernel(b, 0.7, np.full((x.size, 1), 0.4), x[:, None]).value
    assert np.dot(w, vals) == pytest.approx(1.0, abs=1e-6)
    a = heat_kernel(b, 0.7, np.array([0.4]), np.array([-1.1])).value
    c = heat_kernel(b, 0.7, np.array([-1.1]), np.array([0.4])).value
    assert a == c


def test_heat_kernel_torus_limits():
    b = eigen_pairs(torus_model(1), 20)
    assert heat_kernel(b, 50.0, np.array([0.3]), np.array([2.0])).value == pytest.approx(1.0, abs=1e-15)
    g = np.linspace(0, TWO_PI, 4096, endpoint=False)[:, None]
    vals = heat_kernel(b, 0.5, np.full_like(g, 1.0), g).value
    assert np.mean(vals) == pytest.approx(1.0, abs=1e-12)


def test_heat_kernel_warns_on_large_tail():
    b = eigen_pairs(ou_model(1), 3)
    with pytest.warns(RuntimeWarning):
        heat_kernel(b, 0.01, np.array([0.0]), np.array([0.0]))


def test_trace_against_closed_forms():
    b = eigen_pairs(ou_model(1), 50)
    t = 0.8
    assert b.full_trace(t) == pytest.approx(math.exp(-t) / -math.expm1(-t), rel=1e-13)
    direct = 2 * sum(math.exp(-k * k * 0.05) for k in range(1, 200))
    assert eigen_pairs(torus_model(1), 2).full_trace(0.05) == pytest.approx(direct, rel=1e-12)


# -- sampling ------------------------------------------------------------------


def test_sample_mu_ou_moments():
    x = sample_mu(ou_model(1), 100_000, 1)[:, 0]
    assert abs(x.mean()) < 4 / math.sqrt(x.size)
    assert abs(x.var() - 1) < 0.05


def test_sample_mu_deterministic():
    a = sample_mu(torus_model(2), 10, 3)
    assert np.array_equal(a, sample_mu(torus_model(2), 10, 3))
    assert not np.array_equal(a, sample_mu(torus_model(2), 10, 4))


def test_sample_mu_torus_ks():
    x = sample_mu(torus_model(2), 10_000, 2)
    n = x.shape[0]
    for j in range(2):
        u = np.sort(x[:, j]) / TWO_PI
        ks = max(np.max(np.arange(1, n + 1) / n - u), np.max(u - np.arange(n) / n))
        assert ks < 1.63 / math.sqrt(n)


def test_sample_mu_power_fourth_moment():
    x = sample_mu(power_model(1, 1.0, 4.0), 100_000, 7)[:, 0]
    num = integrate.quad(lambda s: s**4 * math.exp(-(s**4)), -np.inf, np.inf)[0]
    den = integrate.quad(lambda s: math.exp(-(s**4)), -np.inf, np.inf)[0]
    m4 = x**4
    assert abs(m4.mean() - num / den) < 4 * m4.std() / math.sqrt(x.size)


def test_sample_mu_perturbed_power_2d():
    # rejection sampler: E|X|² against 2-D polar quadrature of exp(V)
    W = cosine_perturbation(0.3, 2.0)
    m = power_model(2, 1.0, 3.0, W)
    x = sample_mu(m, 50_000, 9)
    r2 = np.sum(x * x, axis=1)

    def dens(r, th, k):
        pt = np.array([r * math.cos(th), r * math.sin(th)])
        return r**k * math.exp(float(m.potential(pt))) * r

    num = integrate.dblquad(lambda r, th: dens(r, th, 2), 0, TWO_PI, 0, 6)[0]
    den = integrate.dblquad(lambda r, th: dens(r, th, 0), 0, TWO_PI, 0, 6)[0]
    assert abs(r2.mean() - num / den) < 4 * r2.std() / math.sqrt(r2.size)
    assert den == pytest.approx(m.normalizer, rel=0.01)


def test_sample_mu_rejects_bad_n():
    with pytest.raises(ValueError):
        sample_mu(ou_model(1), 0, 1)


def test_envelope_check_rejects_steep_perturbation():
    # W growing like |x|^2 cannot be dominated by an exp(-|x|^1.5 / 2) envelope
    from eol.models import Perturbation

    W = Perturbation(lambda x: np.sum(np.asarray(x) ** 2, axis=-1), lambda x: 2 * np.asarray(x), 1.0)
    with pytest.raises(SamplerFailure):
        power_model(2, 1.0, 1.5, W)


def test_density_bounded_initial():
    m = ou_model(1)
    init = density_bounded(m, lambda x: 2.0 * (x[:, 0] > 0), 2.0)
    draws = np.array([init.draw(m, make_rng(0, 5, i)) for i in range(200)])
    assert np.all(draws > 0)
    with pytest.raises(ValueError):
        density_bounded(m, lambda x: 1.0, 0.5)
