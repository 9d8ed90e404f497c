"""Mesh-bound Gaussians: binding, triangle frames, normal rotation, toy meshes,
and the opacity-versus-hull-depth statistic.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .scene_model import (EnvironmentLight, Gaussians, HybridScene, SceneError, TriangleMesh,
                          logit, matrix_to_quat, quat_to_matrix)

KAPPA_INIT = 0.15
ALPHA_INIT = 0.9
FLAT_RATIO = 1e-4


def circumradius(v0, v1, v2):
    """Circumscribed-circle radius of triangles; broadcasts over leading axes."""
    v0, v1, v2 = (np.asarray(v, dtype=np.float64) for v in (v0, v1, v2))
    a = v1 - v0
    b = v2 - v0
    cr = np.linalg.norm(np.cross(a, b), axis=-1)
    if np.any(cr < 1e-12):
        raise SceneError("degenerate triangle: circumradius undefined")
    return (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
            * np.linalg.norm(a - b, axis=-1) / (2.0 * cr))


def circumradius_var(tri):
    """Circumradius of (N, 3, 3) triangles, differentiable."""
    a = tri[:, 1] - tri[:, 0]
    b = tri[:, 2] - tri[:, 0]
    return ad.norm(a) * ad.norm(b) * ad.norm(a - b) / (2.0 * ad.norm(ad.cross(a, b)))


def quat_rotate(q, v):
    """Rotate vectors ``v`` by quaternions ``q`` (w, x, y, z); q is normalised first."""
    q = q / ad.norm(q, keepdims=True)
    w = q[..., 0:1]
    u = q[..., 1:4]
    t = 2.0 * ad.cross(u, v)
    return v + w * t + ad.cross(u, t)


def rotated_normal(face_normal, q_normal):
    """Face normal rotated by the learnable quaternion, renormalised."""
    n = quat_rotate(q_normal, face_normal)
    return n / ad.norm(n, keepdims=True)


def triangle_frames(tri, ref_edge):
    """Centroid, rotation (columns x, y, z) and unit normal of triangles.

    ``tri`` is (N, 3, 3) (array or Var); ``ref_edge`` (N,) picks the edge
    v[k] -> v[k+1] that defines the local x axis.
    """
    centroid = tri.sum(axis=1) * (1.0 / 3.0)
    n_raw = ad.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n = n_raw / ad.norm(n_raw, keepdims=True)
    idx = np.arange(len(ref_edge))
    a = tri[idx, ref_edge]
    b = tri[idx, (ref_edge + 1) % 3]
    e = b - a
    x = e / ad.norm(e, keepdims=True)
    y = ad.cross(n, x)
    R = np.stack([x, y, n], axis=-1)
    return centroid, R, n


def longest_edges(tri):
    tri = np.asarray(tri)
    lens = np.stack([np.linalg.norm(tri[:, (k + 1) % 3] - tri[:, k], axis=-1) for k in range(3)], axis=1)
    return np.argmax(lens, axis=1)


def reference_edges(scene: HybridScene):
    """Recover each bound Gaussian's reference edge from its stored q_shape."""
    g = scene.gaussians
    bound = np.flatnonzero(g.tri_id >= 0)
    tri = scene.mesh.vertices[scene.mesh.faces[g.tri_id[bound]]]
    xaxis = quat_to_matrix(g.q_shape[bound] / np.linalg.norm(g.q_shape[bound], axis=1, keepdims=True))[:, :, 0]
    score = []
    for k in range(3):
        e = tri[:, (k + 1) % 3] - tri[:, k]
        e = e / np.linalg.norm(e, axis=1, keepdims=True)
        score.append((e * xaxis).sum(axis=1))
    out = np.zeros(len(g), dtype=np.int64)
    out[bound] = np.argmax(np.stack(score, axis=1), axis=1)
    return out


def sync_bound(scene: HybridScene):
    """Refresh stored mu and q_shape of bound Gaussians from the mesh."""
    g = scene.gaussians
    bound = np.flatnonzero(g.tri_id >= 0)
    if len(bound) == 0:
        return scene
    ref = reference_edges(scene)[bound]
    tri = scene.mesh.vertices[scene.mesh.faces[g.tri_id[bound]]]
    c, R, _ = triangle_frames(tri, ref)
    g.mu[bound] = c
    g.q_shape[bound] = matrix_to_quat(R)
    return scene


def bind_gaussians(mesh: TriangleMesh, kappa_init: float = KAPPA_INIT,
                   alpha_init: float = ALPHA_INIT, light: EnvironmentLight | None = None) -> HybridScene:
    """One flat Gaussian per face, sitting on the face centroid."""
    if len(mesh.faces) == 0:
        raise SceneError("cannot bind Gaussians to an empty mesh")
    tri = mesh.triangles
    rc = circumradius(tri[:, 0], tri[:, 1], tri[:, 2])
    ref = longest_edges(tri)
    c, R, _ = triangle_frames(tri, ref)
    n = len(tri)
    g = Gaussians.empty(n)
    g.mu = c.copy()
    g.mu_init = c.copy()
    g.q_shape = matrix_to_quat(R)
    g.raw_scale = np.log(np.stack([rc * kappa_init, rc * kappa_init, rc * FLAT_RATIO], axis=1))
    g.raw_alpha[:] = logit(alpha_init)
    g.tri_id = np.arange(n, dtype=np.int64)
    return HybridScene(mesh.copy(), g, light if light is not None else EnvironmentLight())


def cleanup_mesh(mesh: TriangleMesh, tol: float = 1e-7, min_area: float = 1e-12) -> TriangleMesh:
    """Merge near-duplicate vertices, drop degenerate and repeated faces.

    Vertex and face order are otherwise preserved, so a clean mesh comes back
    unchanged.
    """
    from scipy.spatial import cKDTree

    v = mesh.vertices
    rep = np.arange(len(v))
    if len(v):
        for i, j in sorted(cKDTree(v).query_pairs(tol)):
            ri, rj = rep[i], rep[j]
            lo, hi = min(ri, rj), max(ri, rj)
            rep[rep == hi] = lo
    faces = rep[mesh.faces] if len(mesh.faces) else mesh.faces.copy()
    keep = []
    seen = set()
    for fi, f in enumerate(faces):
        if len({int(f[0]), int(f[1]), int(f[2])}) < 3:
            continue
        key = tuple(sorted(int(x) for x in f))
        if key in seen:
            continue
        a, b, c = v[f]
        if 0.5 * np.linalg.norm(np.cross(b - a, c - a)) <= min_area:
            continue
        seen.add(key)
        keep.append(fi)
    faces = faces[keep].reshape(-1, 3)
    used = np.unique(faces)
    remap = np.full(len(v), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(v[used], remap[faces])


# -- toy meshes ---------------------------------------------------------------

def icosphere(level: int = 2, radius: float = 1.0) -> TriangleMesh:
    if level < 0:
        raise ValueError("subdivision level must be >= 0")
    t = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(level):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.array(verts) * radius, np.array(faces))


def cube(size: float = 1.0) -> TriangleMesh:
    if not size > 0:
        raise ValueError("cube size must be positive")
    h = size / 2.0
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    # quads as (v0, v1, v2, v3) counter-clockwise seen from outside
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(v, np.array(faces))


def plane(size: float = 2.0, n: int = 1, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """n x n grid of quads in the z = const plane, facing +z."""
    if n < 1 or not size > 0:
        raise ValueError("plane needs n >= 1 and size > 0")
    xs = np.linspace(-size / 2, size / 2, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    v = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1) + np.asarray(center, dtype=np.float64)
    faces = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b = (i + 1) * (n + 1) + j
            faces += [(a, b, b + 1), (a, b + 1, a + 1)]
    return TriangleMesh(v, np.array(faces))


def quad(p0, p1, p2, p3) -> TriangleMesh:
    return TriangleMesh(np.array([p0, p1, p2, p3], dtype=np.float64), np.array([(0, 1, 2), (0, 2, 3)]))


def merge_meshes(*meshes: TriangleMesh) -> TriangleMesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


TWO_PLATES = dict(plate_size=0.6, plate_center=(0.8, 0.0), plate_n=24,
                  wall_x=1.1, wall_bottom=0.06, wall_top=1.0, wall_half_width=1.5)


def two_plates(**params) -> TriangleMesh:
    """Shaded plate (z = 0, facing up) plus a vertical occluder wall.

    The wall stands beyond the plate's +x edge with a gap below it, so a low
    light from +x is blocked for the plate surface but reaches points just
    under the plate edge.
    """
    p = {**TWO_PLATES, **params}
    if not (p["wall_bottom"] < p["wall_top"] and p["plate_n"] >= 1):
        raise ValueError("invalid two_plates parameters")
    cx, cy = p["plate_center"]
    shaded = plane(p["plate_size"], p["plate_n"], center=(cx, cy, 0.0))
    x, hw = p["wall_x"], p["wall_half_width"]
    zb, zt = p["wall_bottom"], p["wall_top"]
    wall = quad((x, -hw, zb), (x, hw, zb), (x, hw, zt), (x, -hw, zt))  # faces -x
    return merge_meshes(shaded, wall)


def make_test_mesh(kind: str, **params) -> TriangleMesh:
    builders = {"icosphere": icosphere, "cube": cube, "plane": plane, "two_plates": two_plates}
    if kind not in builders:
        raise ValueError(f"unknown test mesh kind {kind!r}")
    return builders[kind](**params)


# -- opacity versus hull depth ----------------------------------------------------

def point_triangle_distance(p, a, b, c):
    """Euclidean distance from points ``p`` (..., 3) to triangles (a, b, c).

    Closest-feature classification over vertex, edge and face regions.
    """
    p, a, b, c = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (p, a, b, c)))
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    closest = np.empty_like(p)
    done = np.zeros(p.shape[:-1], dtype=bool)

    def put(mask, q):
        m = mask & ~done
        closest[m] = q[m]
        done[...] = done | m

    with np.errstate(divide="ignore", invalid="ignore"):
        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        put((d6 >= 0) & (d5 <= d6), c)
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[..., None] * ab)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[..., None] * ac)
        w2 = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w2[..., None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        vv = (vb * denom)[..., None]
        ww = (vc * denom)[..., None]
        put(np.ones_like(done), a + ab * vv + ac * ww)
    return np.linalg.norm(p - closest, axis=-1)


def hull_distances(points, chunk: int = 256):
    """Distance from each point to the boundary of the points' convex hull."""
    from scipy.spatial import ConvexHull
    from scipy.spatial import QhullError

    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 4:
        raise ValueError("need at least 4 points for a 3D hull")
    try:
        hull = ConvexHull(pts)
    except QhullError:
        raise ValueError("all points coplanar: 3D hull undefined") from None
    tri = pts[hull.simplices]
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk, None, :]
        d = point_triangle_distance(p, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])
        out[s:s + chunk] = d.min(axis=1)
    out[hull.vertices] = 0.0
    return out, hull


def opacity_depth_stats(centers, alphas, bins: int = 10):
    """Rows (bin_lo, bin_hi, mean_opacity, count) of opacity versus hull depth.

    Returns ``(rows, distances)``; empty bins report a mean of NaN.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    dist, _ = hull_distances(centers)
    alphas = np.asarray(alphas, dtype=np.float64)
    top = dist.max()
    edges = np.linspace(0.0, top if top > 0 else 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, dist, side="right") - 1, 0, bins - 1)
    rows = []
    for b in range(bins):
        sel = idx == b
        mean = float(alphas[sel].mean()) if sel.any() else float("nan")
        rows.append((float(edges[b]), float(edges[b + 1]), mean, int(sel.sum())))
    return rows, dist


def stats_csv(rows) -> str:
    lines = ["bin_lo,bin_hi,mean_opacity,count"]
    lines += [f"{lo!r},{hi!r},{m!r},{c}" for lo, hi, m, c in rows]
    return "\n".join(lines) + "\n"
