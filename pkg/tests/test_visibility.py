import numpy as np
import pytest
from hypothesis import given, strategies as st

from defergs import sh
from defergs import visibility as vis
from defergs.hybrid_mesh import bind_gaussians, cube, icosphere, plane
from defergs.scene_model import TriangleMesh
from conftest import unit_vectors


def _random_tris(rng, n, spread=1.0, size=0.1):
    c = rng.uniform(-spread, spread, (n, 1, 3))
    return c + rng.normal(0, size, (n, 3, 3))


def _mesh_from_tris(tris):
    return TriangleMesh(tris.reshape(-1, 3), np.arange(3 * len(tris)).reshape(-1, 3))


def test_single_triangle_root_leaf():
    b = vis.build_bvh(_mesh_from_tris(np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]])))
    assert b.n_nodes == 1 and b.left[0] == -1 and b.count[0] == 1


def test_two_far_triangles():
    t = np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]])
    tris = np.concatenate([t] * 3 + [t + 100.0] * 3)   # 6 faces force one split
    b = vis.build_bvh(_mesh_from_tris(tris))
    l, r = b.left[0], b.right[0]
    assert b.left[l] == -1 and b.left[r] == -1
    disjoint = np.any(b.bmax[l] < b.bmin[r]) or np.any(b.bmax[r] < b.bmin[l])
    assert disjoint


def test_structural_audit(rng):
    tris = _random_tris(rng, 1000)
    b = vis.build_bvh(_mesh_from_tris(tris))
    seen = np.zeros(len(tris), int)
    stack = [0]
    while stack:
        k = stack.pop()
        if b.left[k] == -1:
            ids = b.perm[b.start[k]:b.start[k] + b.count[k]]
            seen[ids] += 1
            assert np.all(tris[ids].min(axis=1) >= b.bmin[k] - 1e-12)
            assert np.all(tris[ids].max(axis=1) <= b.bmax[k] + 1e-12)
        else:
            for c in (b.left[k], b.right[k]):
                assert np.all(b.bmin[c] >= b.bmin[k]) and np.all(b.bmax[c] <= b.bmax[k])
                stack.append(c)
    assert np.all(seen == 1)


def test_empty_mesh_error():
    with pytest.raises(ValueError):
        vis.build_bvh(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))))


def test_ground_quad_up_down():
    b = vis.build_bvh(plane(2.0, 1))
    o = np.array([[0.1, 0.2, 1.0]])
    assert not vis.trace_occlusion(b, o, np.array([[0, 0, 1.0]]), 10.0)[0]
    assert vis.trace_occlusion(b, o, np.array([[0, 0, -1.0]]), 10.0)[0]
    assert not vis.trace_occlusion(b, o, np.array([[0, 0, -1.0]]), 0.5)[0]


def test_bvh_matches_brute_force(rng):
    tris = _random_tris(rng, 1000)
    b = vis.build_bvh(_mesh_from_tris(tris))
    o = rng.uniform(-1.5, 1.5, (1000, 3))
    d = unit_vectors(rng, 1000)
    fast = vis.trace_occlusion(b, o, d, 5.0)
    ref = vis.brute_force_occlusion(tris, o, d, 5.0)
    assert np.sum(fast != ref) == 0
    assert 0 < fast.sum() < len(fast)


@given(st.integers(0, 10_000))
def test_bvh_brute_force_property(seed):
    rng = np.random.default_rng(seed)
    tris = _random_tris(rng, 60, spread=0.5, size=0.3)
    b = vis.build_bvh(_mesh_from_tris(tris))
    o = rng.uniform(-1, 1, (80, 3))
    d = unit_vectors(rng, 80)
    t_max = rng.uniform(0.1, 3.0)
    assert np.array_equal(vis.trace_occlusion(b, o, d, t_max), vis.brute_force_occlusion(tris, o, d, t_max))


def test_broadcast_shapes(rng):
    b = vis.build_bvh(icosphere(1))
    o = np.zeros((4, 1, 3))
    d = unit_vectors(rng, 12).reshape(4, 3, 3)
    assert vis.trace_occlusion(b, o, d, 10.0).shape == (4, 3)
    assert vis.trace_occlusion(b, o, d, 10.0).all()
    assert vis.brute_force_occlusion(b.tris, o, d, 10.0).shape == (4, 3)


def test_bake_open_scene():
    m = TriangleMesh([[-1, -1, 0], [1, -1, 0], [0, 1, 0]], [[0, 1, 2]])
    b = vis.build_bvh(m)
    coeffs, resid = vis.bake_visibility(np.zeros((1, 3)), np.array([[0, 0, 1.0]]), b, 10.0)
    d = vis.bake_directions(400)
    d = d[np.abs(d[:, 2]) > 0.05]
    vals = sh.sh_eval(coeffs[0], d)
    assert np.all(np.abs(vals - 1.0) <= 0.05)


def test_bake_closed_cube():
    b = vis.build_bvh(cube(1.0))
    coeffs, _ = vis.bake_visibility(np.zeros((1, 3)), np.array([[0, 0, 1.0]]), b, 10.0)
    vals = sh.sh_eval(coeffs[0], vis.bake_directions(400))
    assert np.all(vals <= 0.05)


def test_bake_rank_precondition():
    b = vis.build_bvh(cube(1.0))
    with pytest.raises(ValueError):
        vis.bake_visibility(np.zeros((1, 3)), np.array([[0, 0, 1.0]]), b, 10.0, n_dirs=8, degree=2)


def test_finalize_idempotent():
    sc = bind_gaussians(icosphere(1))
    a, _ = vis.finalize_bake(sc)
    b, _ = vis.finalize_bake(a)
    assert a.baked and b.baked and not sc.baked
    assert np.max(np.abs(a.gaussians.sh_aux - b.gaussians.sh_aux)) <= 1e-6
    assert np.all(a.gaussians.sh_aux[:, :, 0] == a.gaussians.sh_aux[:, :, 2])


def test_first_hit_plane_distance():
    b = vis.build_bvh(plane(2.0, 1))
    t = vis.first_hit(b, np.array([[0.1, 0.2, 1.0]]), np.array([[0.0, 0.0, -2.0]]))
    assert np.isclose(t[0], 0.5)
    assert np.isinf(vis.first_hit(b, np.array([[0.1, 0.2, 1.0]]), np.array([[0.0, 0.0, 1.0]]))[0])


def test_first_hit_matches_brute_force(rng):
    tris = _random_tris(rng, 300)
    b = vis.build_bvh(_mesh_from_tris(tris))
    o = rng.uniform(-1.5, 1.5, (500, 3))
    d = unit_vectors(rng, 500)
    fast = vis.first_hit(b, o, d, 5.0)
    ref = vis.brute_force_first_hit(tris, o, d, 5.0)
    hit = np.isfinite(ref)
    assert np.array_equal(np.isfinite(fast), hit)
    assert 0 < hit.sum() < len(hit)
    assert np.allclose(fast[hit], ref[hit], rtol=0, atol=1e-12)
