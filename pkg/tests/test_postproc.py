import numpy as np
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from defergs import postproc
from defergs.splat_raster import GBuffer


def test_srgb_endpoints():
    assert postproc.tonemap_srgb(0.0) == 0.0
    assert np.isclose(postproc.tonemap_srgb(1.0), 1.0)
    assert np.isclose(postproc.tonemap_srgb(0.0031308), 0.04045, atol=1e-5)
    assert postproc.tonemap_srgb(2.0) == postproc.tonemap_srgb(1.0)


@given(st.floats(0.0, 1.0))
def test_srgb_inverse(x):
    assert abs(postproc.srgb_to_linear(postproc.tonemap_srgb(x)) - x) < 1e-9


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_srgb_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert postproc.tonemap_srgb(lo) <= postproc.tonemap_srgb(hi)


def test_psnr_values():
    gt = np.zeros((4, 4, 3))
    assert np.isclose(postproc.psnr(gt + 0.1, gt), 20.0)
    assert postproc.psnr(gt, gt) == 99.0
    pred = gt.copy()
    pred[0, 0] = np.sqrt(0.01 * 16)   # MSE 0.01 over all pixels and channels
    assert np.isclose(postproc.psnr(pred, gt), 20.0)


def test_psnr_mask():
    gt = np.zeros((2, 2, 3))
    pred = gt.copy()
    pred[0, 0] = 1.0
    m = np.array([[0, 1], [1, 1]], bool)
    assert postproc.psnr(pred, gt, m) == 99.0


def test_rescale_values(rng):
    gt = rng.uniform(0.1, 0.9, (8, 8, 3))
    m = np.ones((8, 8), bool)
    assert np.allclose(postproc.basecolor_rescale(2 * gt, gt, m), 0.5)
    assert np.allclose(postproc.basecolor_rescale(gt, gt, m), 1.0)


def test_rescale_median_robust(rng):
    gt = rng.uniform(0.1, 0.9, (10, 10, 3))
    pred = gt.copy()
    out = rng.choice(100, 10, replace=False)
    pred.reshape(-1, 3)[out] *= 100
    k = postproc.basecolor_rescale(pred, gt, np.ones((10, 10), bool))
    assert np.allclose(k, 1.0, atol=1e-6)


def _gb(depth, normal, albedo, opacity=None):
    H, W = depth.shape
    o = np.ones((H, W)) if opacity is None else opacity
    z = np.zeros((H, W))
    return GBuffer(depth=depth * o, opacity=o, normal=normal, albedo=albedo * o[..., None],
                   roughness=z, metalness=z, radiance=np.zeros((H, W, 3)),
                   aux_sh=np.zeros((H, W, 27)))


def _flat_plane(H=32, W=32, albedo=0.6):
    depth = np.full((H, W), 3.0)
    n = np.zeros((H, W, 3))
    n[..., 2] = -1.0
    a = np.full((H, W, 3), albedo)
    return depth, n, a


def test_denoise_zero_variance_identity():
    d, n, a = _flat_plane()
    img = np.full(d.shape + (3,), 0.37)
    out = postproc.bilateral_denoise(img, _gb(d, n, a))
    assert np.allclose(out, img, atol=1e-12)


def test_denoise_reduces_noise(rng):
    d, n, a = _flat_plane()
    ref = np.full(d.shape + (3,), 0.6)
    noisy = ref + rng.normal(0, 0.05, ref.shape)
    out = postproc.bilateral_denoise(noisy, _gb(d, n, a))
    assert np.mean((out - ref) ** 2) <= 0.7 * np.mean((noisy - ref) ** 2)


def test_denoise_preserves_albedo_edge(rng):
    d, n, _ = _flat_plane()
    a = np.where((np.arange(32)[None, :, None] // 8 + np.arange(32)[:, None, None] // 8) % 2,
                 0.8, 0.2) * np.ones((32, 32, 3))
    noisy = a + rng.normal(0, 0.02, a.shape)
    out = postproc.bilateral_denoise(noisy, _gb(d, n, a))
    err = np.abs(out - a)[..., 0]
    assert np.max(err) < 0.1


def test_denoise_leaves_empty_pixels():
    d, n, a = _flat_plane(8, 8)
    o = np.ones((8, 8))
    o[:, :4] = 0.0
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    out = postproc.bilateral_denoise(img, _gb(d, n, a, o))
    assert np.array_equal(out[:, :4], img[:, :4])


@given(arrays(np.float64, (6, 6, 3), elements=st.floats(0, 1)))
def test_denoise_within_neighbourhood_range(img):
    d, n, a = _flat_plane(6, 6, 0.5)
    out = postproc.bilateral_denoise(img, _gb(d, n, a), radius=1)
    assert out.min() >= img.min() - 1e-9 and out.max() <= img.max() + 1e-9


def test_denoise_ignores_unshaded_neighbours():
    # low-opacity pixels hold background (zero) and must not darken the surface next to them
    d, n, a = _flat_plane(8, 8)
    o = np.ones((8, 8))
    o[:, :3] = 0.2
    img = np.where(o[..., None] > 0.5, 0.4, 0.0) * np.ones((8, 8, 3))
    out = postproc.bilateral_denoise(img, _gb(d, n, a, o))
    assert np.allclose(out[:, 3:], 0.4, atol=1e-12)
    assert np.array_equal(out[:, :3], img[:, :3])


def test_denoise_normalized_buffer(rng):
    d, n, a = _flat_plane()
    o = np.full(d.shape, 0.8)
    z = np.zeros(d.shape)
    gb = GBuffer(depth=d, opacity=o, normal=n, albedo=a, roughness=z, metalness=z,
                 radiance=np.zeros(a.shape), aux_sh=np.zeros(d.shape + (27,)), normalized=True)
    ref = np.full(a.shape, 0.6)
    assert np.allclose(postproc.bilateral_denoise(ref, gb), ref, atol=1e-12)
    noisy = ref + rng.normal(0, 0.05, ref.shape)
    out = postproc.bilateral_denoise(noisy, gb)
    assert np.mean((out - ref) ** 2) <= 0.7 * np.mean((noisy - ref) ** 2)
