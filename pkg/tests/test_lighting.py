import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defergs import sh as shlib
from defergs.brdf import eval_brdf, lambertian_brdf
from defergs.lighting import NoOcclusion, ShadingPoint, incoming_light, shade
from defergs.sampling import dir_to_uv
from defergs.scene_model import EnvironmentLight

DC = 2.0 * np.sqrt(np.pi)  # SH DC coefficient of a unit constant


def points(n, albedo=0.6, rough=1.0, metal=0.0, normal=(0, 0, 1), wo=(0, 0, 1), aux=None):
    nv = np.tile(np.asarray(normal, float), (n, 1))
    wv = np.asarray(wo, float)
    wv = np.tile(wv / np.linalg.norm(wv), (n, 1))
    return ShadingPoint(x=np.zeros((n, 3)), n=nv, albedo=np.full((n, 3), albedo),
                        roughness=np.full(n, rough), metalness=np.full(n, metal), wo=wv,
                        aux_sh=np.zeros((n, 9, 3)) if aux is None else aux)


def constant_light(c=1.0, envmap=False):
    sh = np.zeros((9, 3))
    sh[0] = c * DC
    env = np.full((16, 32, 3), c, dtype=np.float32) if envmap else None
    return EnvironmentLight(sh, env)


class Blocked:
    def visible(self, x, n, wi):
        return np.zeros(wi.shape[:-1])


def test_occluded_without_aux_is_black():
    sp = points(3)
    wi = np.tile([0.0, 0.0, 1.0], (3, 5, 1))
    L, V = incoming_light(sp, wi, constant_light(2.0), Blocked())
    assert not L.any() and not V.any()


def test_visible_constant_light():
    sp = points(2)
    rng = np.random.default_rng(0)
    wi = rng.normal(size=(2, 7, 3))
    wi[..., 2] = np.abs(wi[..., 2])
    wi /= np.linalg.norm(wi, axis=-1, keepdims=True)
    L, _ = incoming_light(sp, wi, constant_light(0.7), NoOcclusion())
    assert np.allclose(L, 0.7, atol=1e-12)


def test_local_light_when_occluded():
    aux = np.zeros((1, 9, 3))
    aux[0, 0] = 0.2 * DC
    sp = points(1, aux=aux)
    wi = np.array([[[0.6, 0.0, 0.8]]])
    L, _ = incoming_light(sp, wi, constant_light(5.0), Blocked())
    assert np.allclose(L, 0.2, atol=1e-12)


def test_baked_mode_reads_visibility_from_aux():
    aux = np.zeros((1, 9, 3))
    aux[0, 0] = 0.5 * DC
    sp = points(1, aux=aux)
    wi = np.array([[[0.0, 0.0, 1.0]]])
    L, V = incoming_light(sp, wi, constant_light(2.0), mode="baked")
    assert np.allclose(V, 0.5) and np.allclose(L, 1.0)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        incoming_light(points(1), np.array([[[0.0, 0, 1]]]), constant_light(), mode="final")


@pytest.mark.parametrize("strategy", ["fibonacci", "mis"])
def test_lambertian_constant_light(strategy):
    sp = points(8)
    rgb, _ = shade(sp, constant_light(1.0, envmap=True), 4096, strategy, NoOcclusion(),
                   seed=2, brdf=lambertian_brdf)
    assert np.all(np.abs(rgb - 0.6) <= 0.6 * 0.02)


def test_black_light_is_exactly_zero():
    sp = points(4, rough=0.4, metal=0.5)
    rgb, _ = shade(sp, constant_light(0.0), 64, "fibonacci", NoOcclusion())
    assert np.array_equal(rgb, np.zeros((4, 3)))


def test_spp_zero_rejected():
    with pytest.raises(ValueError):
        shade(points(1), constant_light(), 0)


def test_mis_needs_envmap():
    with pytest.raises(ValueError):
        shade(points(1), constant_light(), 8, "mis")


def test_mirror_lobe_against_high_spp_reference():
    # one bright texel in the reflected direction of a 45 degree view
    env = np.full((32, 64, 3), 0.01, dtype=np.float32)
    wo = np.array([-np.sqrt(0.5), 0.0, np.sqrt(0.5)])
    refl = np.array([np.sqrt(0.5), 0.0, np.sqrt(0.5)])
    u, v = dir_to_uv(refl)
    env[int(v * 32), int(u * 64)] = 500.0
    light = EnvironmentLight(np.zeros((9, 3)), env)
    sp = points(1, albedo=1.0, rough=0.3, metal=1.0, wo=wo)
    est, _ = shade(sp, light, 4096, "mis", NoOcclusion(), seed=1)
    ref, _ = shade(sp, light, 100_000, "mis", NoOcclusion(), seed=99)
    assert est.min() > 0
    assert np.all(np.abs(est - ref) <= 0.1 * ref)


def _mc_reference(sp, sh_coeffs, n=1_000_000, seed=0, chunk=250_000):
    # uniform-hemisphere Monte Carlo, independent of the spiral sampler
    rng = np.random.default_rng(seed)
    out = np.zeros((len(sp), 3))
    for p in range(len(sp)):
        nrm = sp.n[p]
        acc = np.zeros(3)
        for _ in range(n // chunk):
            v = rng.normal(size=(chunk, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            v *= np.sign(v @ nrm)[:, None]
            L = np.maximum(shlib.basis(v, 2) @ sh_coeffs, 0.0)
            f = eval_brdf(sp.albedo[p][None], sp.roughness[p:p + 1], sp.metalness[p:p + 1],
                          nrm[None], v, sp.wo[p][None])
            acc += (L * f * (v @ nrm)[:, None]).sum(0)
        out[p] = acc * 2 * np.pi / n
    return out


def test_estimator_matches_brute_force_reference():
    rng = np.random.default_rng(7)
    P = 20
    n = rng.normal(size=(P, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    wo = rng.normal(size=(P, 3))
    wo /= np.linalg.norm(wo, axis=1, keepdims=True)
    wo = np.where((wo * n).sum(1, keepdims=True) < 0.3, n, wo)
    sp = ShadingPoint(np.zeros((P, 3)), n, rng.uniform(0.1, 0.9, (P, 3)), rng.uniform(0.4, 1.0, P),
                      rng.uniform(0, 1, P), wo, np.zeros((P, 9, 3)))
    coeffs = rng.normal(0, 0.3, (9, 3))
    coeffs[0] = 2.0 * DC
    light = EnvironmentLight(coeffs)
    est, _ = shade(sp, light, 4096, "fibonacci", NoOcclusion(), seed=3)
    ref = _mc_reference(sp, coeffs)
    assert np.all(np.abs(est - ref) <= 0.02 * ref)


def smooth_envmap():
    H, W = 16, 32
    th = (np.arange(H) + 0.5) / H * np.pi
    ph = (np.arange(W) + 0.5) / W * 2 * np.pi
    T, P = np.meshgrid(th, ph, indexing="ij")
    base = 0.5 + 0.4 * np.cos(T)[..., None] + 0.2 * np.sin(P)[..., None] * np.array([1.0, 0.5, 0.2])
    return np.maximum(base, 0.05).astype(np.float32)


@pytest.mark.parametrize("single", ["light", "ggx"])
def test_mis_and_single_strategy_agree_over_seeds(single):
    light = EnvironmentLight(np.zeros((9, 3)), smooth_envmap())
    sp = points(1, albedo=0.5, rough=0.5, metal=0.3, wo=(0.3, 0.0, 0.95))
    mis = np.mean([shade(sp, light, 64, "mis", NoOcclusion(), seed=s)[0] for s in range(100)], axis=0)
    one = np.mean([shade(sp, light, 64, single, NoOcclusion(), seed=s)[0] for s in range(100)], axis=0)
    assert np.all(np.abs(mis - one) <= 0.01 * one)


@settings(max_examples=25)
@given(st.floats(0.0, 20.0), st.integers(0, 2**16))
def test_shade_scales_linearly_with_light(k, seed):
    rng = np.random.default_rng(seed)
    coeffs = rng.normal(0, 0.3, (9, 3))
    coeffs[0] += 2.0
    sp = points(3, albedo=0.4, rough=0.6, metal=0.2, wo=(0.2, 0.1, 0.97))
    a, _ = shade(sp, EnvironmentLight(coeffs), 32, "fibonacci", NoOcclusion(), seed=seed)
    b, _ = shade(sp, EnvironmentLight(k * coeffs), 32, "fibonacci", NoOcclusion(), seed=seed)
    assert np.allclose(b, k * a, rtol=1e-12, atol=1e-300)


@settings(max_examples=25)
@given(st.integers(0, 2**16), st.sampled_from(["fibonacci", "mis"]))
def test_output_finite_and_non_negative(seed, strategy):
    rng = np.random.default_rng(seed)
    P = 6
    n = rng.normal(size=(P, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    wo = rng.normal(size=(P, 3))
    wo /= np.linalg.norm(wo, axis=1, keepdims=True)
    aux = rng.normal(0, 1.0, (P, 9, 3))
    sp = ShadingPoint(np.zeros((P, 3)), n, rng.uniform(0, 1, (P, 3)), rng.uniform(0.05, 1, P),
                      rng.uniform(0, 1, P), wo, aux)
    light = EnvironmentLight(rng.normal(0, 1, (9, 3)), smooth_envmap())
    rgb, _ = shade(sp, light, 16, strategy, NoOcclusion(), seed=seed)
    assert np.all(np.isfinite(rgb)) and np.all(rgb >= 0)


def test_nan_contributions_are_dropped():
    sp = points(3, rough=0.5)
    sp.albedo[1] = np.nan
    rgb, _ = shade(sp, constant_light(1.0), 64, "fibonacci", NoOcclusion())
    assert np.all(np.isfinite(rgb))
    assert np.all(rgb[[0, 2]] > 0)


def test_back_facing_view_is_black():
    sp = points(2, wo=(0, 0, -1))
    rgb, _ = shade(sp, constant_light(1.0), 32, "fibonacci", NoOcclusion())
    assert not rgb.any()
