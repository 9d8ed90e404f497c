import numpy as np
import pytest
from hypothesis import given, strategies as st

from defergs import brdf
from defergs.sampling import fibonacci_hemisphere
from conftest import hemisphere_vectors, unit_vectors


def test_ggx_d_values():
    assert np.isclose(brdf.ggx_d(1.0, 0.3), 1 / np.pi)
    assert np.isclose(brdf.ggx_d(1.0, 0.9), 1 / np.pi)
    assert np.isclose(brdf.ggx_d(0.25, 1.0), 5.0930, atol=1e-4)
    assert np.isclose(brdf.ggx_d(0.25, 0.0), 0.01989, atol=1e-5)


def test_fresnel_values():
    f0 = np.array([0.04, 0.5, 0.9])
    assert np.allclose(brdf.fresnel(f0, 1.0), f0)
    assert np.allclose(brdf.fresnel(f0, 0.0), 1.0)
    assert np.isclose(brdf.fresnel(0.04, 0.5), 0.07)


def test_smith_values():
    assert brdf.smith_lambda(0.5, 1.0) == 0.0
    assert brdf.smith_g(0.5, 1.0, 1.0) == 1.0
    assert np.isclose(brdf.smith_lambda(1.0, 0.5), 0.5)
    assert np.isclose(brdf.smith_g(1.0, 0.5, 0.5), 0.5)
    assert np.isclose(brdf.smith_g(1e-8, 0.3, 0.7), 1.0)
    assert brdf.smith_g(0.5, -0.2, 0.7) == 0.0


def _one(albedo, r, m, n, wi, wo):
    return brdf.eval_brdf(np.asarray(albedo, float), np.asarray(r, float), np.asarray(m, float),
                          np.asarray(n, float), np.asarray(wi, float), np.asarray(wo, float))


def test_white_rough_normal_incidence():
    n = np.array([0.0, 0.0, 1.0])
    f = _one([0.6] * 3, 1.0, 0.0, n, n, n)
    assert np.allclose(f, 0.6 / np.pi + 0.04 / (4 * np.pi), atol=1e-12)
    assert np.allclose(f, 0.1942, atol=1e-4)


def test_metal_has_no_diffuse():
    n = np.array([0.0, 0.0, 1.0])
    wi = np.array([0.6, 0.0, 0.8])
    wo = np.array([-0.6, 0.0, 0.8])
    f_metal = _one([0.7, 0.2, 0.1], 0.5, 1.0, n, wi, wo)
    spec_only = _one([0.0] * 3, 0.5, 0.0, n, wi, wo)
    # the metal's specular uses f0 = albedo; removing it must leave nothing
    alpha_g = 0.25
    h = np.array([0.0, 0.0, 1.0])
    D = brdf.ggx_d(alpha_g, 1.0)
    G = brdf.smith_g(alpha_g, 0.8, 0.8)
    F = brdf.fresnel(np.array([0.7, 0.2, 0.1]), float(h @ wo))
    assert np.allclose(f_metal, D * G * F / (4 * 0.8 * 0.8), rtol=1e-9)
    assert np.all(spec_only > 0)


def test_backface_zero():
    n = np.array([0.0, 0.0, 1.0])
    f = _one([0.5] * 3, 0.5, 0.0, n, [0.0, 0.6, -0.8], n)
    assert np.all(f == 0.0)


@pytest.mark.parametrize("r", [0.3, 0.5, 1.0])
def test_ndf_normalization(r):
    d = fibonacci_hemisphere(100000, np.array([0.0, 0.0, 1.0]))
    cos = d[:, 2]
    est = np.mean(brdf.ggx_d(r * r, cos) * cos) * 2 * np.pi
    assert abs(est - 1.0) < 0.02


def test_reciprocity(rng):
    n = unit_vectors(rng, 1000)
    wi = np.stack([hemisphere_vectors(rng, k, 1)[0] for k in n])
    wo = np.stack([hemisphere_vectors(rng, k, 1)[0] for k in n])
    a = rng.uniform(0, 1, (1000, 3))
    r = rng.uniform(0.09, 1, 1000)
    m = rng.uniform(0, 1, 1000)
    f1 = brdf.eval_brdf(a, r, m, n, wi, wo)
    f2 = brdf.eval_brdf(a, r, m, n, wo, wi)
    assert np.max(np.abs(f1 - f2)) < 1e-9


def test_printed_forms_differ():
    n = np.array([0.0, 0.0, 1.0])
    wi = np.array([0.8, 0.0, 0.6])
    wo = np.array([-0.3, 0.4, np.sqrt(0.75)])
    a = _one([0.5] * 3, 0.5, 0.3, n, wi, wo)
    b = brdf.eval_brdf(np.full(3, 0.5), np.asarray(0.5), np.asarray(0.3), n, wi, wo, printed_forms=True)
    assert np.all(np.isfinite(b)) and not np.allclose(a, b)


@given(st.floats(0.3, 1.0), st.integers(0, 10_000))
def test_specular_lobe_energy_bounded(r, seed):
    # a white metal (F = 1) can only lose energy to masking
    rng = np.random.default_rng(seed)
    m = 1.0
    n = np.array([0.0, 0.0, 1.0])
    wo = hemisphere_vectors(rng, n, 1)[0]
    wo[2] = max(wo[2], 0.2)
    wo /= np.linalg.norm(wo)
    wi = fibonacci_hemisphere(20000, n)
    f = brdf.eval_brdf(np.ones(3), np.asarray(r), np.asarray(m), n, wi, wo[None].repeat(20000, 0))
    assert np.all(f >= 0)
    rho = np.mean(f[:, 0] * wi[:, 2]) * 2 * np.pi
    assert rho <= 1.0 + 0.02
