import numpy as np
import pytest

from defergs import io
from defergs.hybrid_mesh import bind_gaussians, icosphere
from defergs.scene_model import (Camera, EnvironmentLight, Gaussians, HybridScene, SceneError,
                                 TrainView, TriangleMesh)


def _tri_scene():
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    return bind_gaussians(mesh)


def _random_gaussians(rng, n):
    g = Gaussians.empty(n)
    g.mu = rng.normal(size=(n, 3))
    g.q_shape = rng.normal(size=(n, 4))
    g.raw_scale = rng.normal(size=(n, 3))
    g.raw_alpha = rng.normal(size=n)
    g.sh_rgb = rng.normal(size=(n, 16, 3))
    g.raw_albedo = rng.normal(size=(n, 3))
    g.raw_rough = rng.normal(size=n)
    g.raw_metal = rng.normal(size=n)
    g.q_normal = rng.normal(size=(n, 4))
    g.sh_aux = rng.normal(size=(n, 9, 3))
    g.mu_init = rng.normal(size=(n, 3))
    return g


def _assert_same(a: Gaussians, b: Gaussians, tol):
    for name in ("mu", "q_shape", "raw_scale", "raw_alpha", "sh_rgb", "raw_albedo", "raw_rough",
                 "raw_metal", "q_normal", "sh_aux", "mu_init"):
        assert np.max(np.abs(getattr(a, name) - getattr(b, name)), initial=0.0) <= tol, name
    assert np.array_equal(a.tri_id, b.tri_id)


def test_minimal_manifest(tmp_path):
    io.save_scene(_tri_scene(), tmp_path / "s.txt")
    sc = io.load_scene(tmp_path / "s.txt")
    assert len(sc.gaussians) == 1 and sc.gaussians.tri_id[0] == 0
    assert sc.fully_bound


def test_binding_mismatch(tmp_path):
    sc = _tri_scene()
    io.save_scene(sc, tmp_path / "s.txt")
    extra = sc.gaussians.concat(sc.gaussians)
    extra.tri_id[:] = -1
    (tmp_path / "s.ply").write_bytes(io.encode_gaussians(extra))
    with pytest.raises(SceneError, match="binding mismatch"):
        io.load_scene(tmp_path / "s.txt")


def test_missing_manifest_key(tmp_path):
    (tmp_path / "m.txt").write_text("format = defergs-scene 1\nmesh = m.obj\n")
    with pytest.raises(SceneError, match="malformed manifest"):
        io.load_scene(tmp_path / "m.txt")


def test_scene_roundtrip_twice(tmp_path):
    sc = bind_gaussians(icosphere(1))
    sc.gaussians.raw_albedo += 0.3
    io.save_scene(sc, tmp_path / "a.txt")
    a = io.load_scene(tmp_path / "a.txt")
    io.save_scene(a, tmp_path / "b.txt")
    b = io.load_scene(tmp_path / "b.txt")
    _assert_same(sc.gaussians, a.gaussians, 1e-6)
    _assert_same(a.gaussians, b.gaussians, 1e-6)
    assert np.allclose(a.mesh.vertices, sc.mesh.vertices, atol=1e-6)


def test_empty_gaussians(tmp_path):
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    io.save_scene(HybridScene(mesh, Gaussians.empty(0)), tmp_path / "e.txt")
    assert b"element vertex 0" in (tmp_path / "e.ply").read_bytes()
    assert len(io.load_scene(tmp_path / "e.txt").gaussians) == 0


def test_random_gaussians_roundtrip(rng):
    g = _random_gaussians(rng, 100)
    _assert_same(g, io.decode_gaussians(io.encode_gaussians(g)), 1e-6)


def test_envmap_bit_exact(tmp_path, rng):
    env = rng.uniform(0, 50, (8, 16, 3)).astype(np.float32)
    sc = _tri_scene()
    sc.light = EnvironmentLight(rng.normal(size=(9, 3)), env)
    io.save_scene(sc, tmp_path / "s.txt")
    out = io.load_scene(tmp_path / "s.txt")
    assert np.array_equal(out.light.envmap, env)
    assert np.allclose(out.light.sh_global, sc.light.sh_global, atol=1e-12)


def test_pfm_roundtrip(tmp_path, rng):
    img = rng.uniform(0, 2, (5, 7, 3)).astype(np.float32)
    io.write_pfm(tmp_path / "x.pfm", img)
    assert np.array_equal(io.read_pfm(tmp_path / "x.pfm"), img)


def test_png_roundtrip(tmp_path):
    img = np.linspace(0, 1, 4 * 6 * 3).reshape(4, 6, 3)
    io.write_png(tmp_path / "x.png", img)
    assert np.max(np.abs(io.read_png(tmp_path / "x.png") - img)) <= 0.5 / 255 + 1e-9


def test_obj_roundtrip():
    m = icosphere(1)
    m2 = io.decode_obj(io.encode_obj(m))
    assert np.array_equal(m2.faces, m.faces)
    assert np.allclose(m2.vertices, m.vertices, atol=1e-12)


def test_atomic_write_creates_parents(tmp_path):
    p = tmp_path / "a" / "b" / "c.txt"
    io.atomic_write(p, b"hi")
    assert p.read_bytes() == b"hi"
    assert [x.name for x in p.parent.iterdir()] == ["c.txt"]


def test_missing_file_error(tmp_path):
    with pytest.raises(SceneError):
        io.load_scene(tmp_path / "nope.txt")


def test_kv_parse():
    assert io.parse_kv("a = 1 # note\n\nb=x y\n") == {"a": "1", "b": "x y"}
    with pytest.raises(SceneError):
        io.parse_kv("no equals here")


def test_cameras_and_views(tmp_path, rng):
    cam = Camera.look_at([1, 2, 3], [0, 0, 0], width=5, height=4)
    views = [TrainView(rng.uniform(size=(4, 5, 3)), (rng.uniform(size=(4, 5)) > 0.5).astype(float), cam)]
    io.save_views(views, tmp_path / "v")
    back = io.load_views(tmp_path / "v")
    assert np.allclose(back[0].camera.R, cam.R) and back[0].camera.width == 5
    assert np.allclose(back[0].image, views[0].image, atol=1e-6)
    assert np.array_equal(back[0].mask, views[0].mask)
    one = tmp_path / "one.json"
    one.write_text(__import__("json").dumps(io.camera_to_dict(cam)))
    assert len(io.read_cameras(one)) == 1
