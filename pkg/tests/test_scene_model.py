import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from defergs.scene_model import (Camera, EnvironmentLight, Gaussians, HybridScene, SceneError,
                                 TrainView, TriangleMesh, activate_params, matrix_to_quat,
                                 quat_to_matrix)


def _act(**kw):
    base = dict(raw_alpha=np.zeros(1), raw_scale=np.zeros((1, 3)), raw_albedo=np.zeros((1, 3)),
                raw_rough=np.zeros(1), raw_metal=np.zeros(1),
                q_shape=np.array([[1.0, 0, 0, 0]]), q_normal=np.array([[2.0, 0, 0, 0]]))
    base.update(kw)
    return activate_params(**base)


def test_activation_defaults():
    a = _act()
    assert np.isclose(a.roughness[0], 0.545)
    assert np.allclose(a.albedo, 0.5)
    assert np.isclose(a.alpha[0], 0.5) and np.isclose(a.metalness[0], 0.5)
    assert np.allclose(a.scale, 1.0)
    assert np.allclose(a.q_normal, [[1, 0, 0, 0]])


def test_roughness_lower_limit():
    a = _act(raw_rough=np.array([-60.0]))
    assert abs(a.roughness[0] - 0.09) < 1e-12


@given(arrays(np.float64, 5, elements=st.floats(-50, 50)))
def test_activation_ranges(x):
    a = _act(raw_alpha=x, raw_rough=x, raw_metal=x, raw_albedo=np.stack([x] * 3, 1),
             raw_scale=np.stack([x / 10] * 3, 1))
    assert np.all((a.alpha >= 0) & (a.alpha <= 1))
    assert np.all((a.roughness >= 0.09) & (a.roughness <= 1))
    assert np.all(a.scale > 0)


@given(arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1))
def test_quaternion_roundtrip(q):
    q = q / np.linalg.norm(q)
    R = quat_to_matrix(q[None])[0]
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)
    q2 = matrix_to_quat(R[None])[0]
    assert np.allclose(q2, q * np.sign(q[0] if q[0] != 0 else 1.0), atol=1e-9) or \
        np.allclose(q2, -q, atol=1e-9) or np.allclose(q2, q, atol=1e-9)


def test_gaussians_validate_rejects_nan():
    g = Gaussians.empty(2)
    g.mu[0, 0] = np.nan
    with pytest.raises(SceneError):
        g.validate()


def test_gaussians_concat_subset():
    g = Gaussians.empty(3)
    g.raw_alpha[:] = [1, 2, 3]
    h = g.concat(g.subset([2]))
    assert len(h) == 4 and h.raw_alpha[-1] == 3


def test_splat_view():
    g = Gaussians.empty(1)
    g.tri_id[0] = 0
    s = g.splat(0)
    assert s.tri_id == 0 and np.isclose(s.r, 0.545)


def test_mesh_validate():
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])
    with pytest.raises(SceneError):
        m.validate()
    deg = TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    with pytest.raises(SceneError):
        deg.validate()


def test_scene_binding_out_of_range():
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    g = Gaussians.empty(1)
    g.tri_id[0] = 3
    with pytest.raises(SceneError, match="binding mismatch"):
        HybridScene(m, g).validate()


def test_camera_look_at_centre():
    cam = Camera.look_at([0, 0, -3], [0, 0, 0], up=(0, 1, 0), width=33, height=33)
    assert np.allclose(cam.center, [0, 0, -3])
    xc = cam.to_camera(np.zeros((1, 3)))
    assert np.allclose(xc, [[0, 0, 3]])


def test_camera_rejects_bad_focal():
    with pytest.raises(SceneError):
        Camera(np.eye(3), np.zeros(3), 0.0, 1.0, 0, 0, 4, 4)


def test_envmap_rejects_negative():
    with pytest.raises(SceneError):
        EnvironmentLight(np.zeros((9, 3)), -np.ones((4, 8, 3)))


def test_no_envmap_sampler_error():
    with pytest.raises(SceneError):
        EnvironmentLight().sampler


def test_view_mask_binary():
    cam = Camera.look_at([0, 0, -3], [0, 0, 0], width=4, height=4)
    with pytest.raises(SceneError):
        TrainView(np.zeros((4, 4, 3)), np.full((4, 4), 0.5), cam)
