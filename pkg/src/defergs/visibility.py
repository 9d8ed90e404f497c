"""Triangle BVH, any-hit occlusion queries and per-Gaussian visibility baking."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from . import sh as shlib
from .sampling import fibonacci_sphere
from .scene_model import HybridScene, TriangleMesh

RAY_EPS = 1e-3      # origin offset along the normal
T_EPS = 1e-7        # parametric cutoff
MAX_LEAF = 4
MAX_DEPTH = 64


@dataclass
class Bvh:
    """Flattened BVH. Leaves have ``left == -1`` and own ``perm[start:start+count]``."""

    bmin: np.ndarray
    bmax: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    perm: np.ndarray
    tris: np.ndarray  # (F, 3, 3) triangle vertices in original order
    depth: int

    @property
    def n_nodes(self):
        return len(self.left)


def build_bvh(mesh: TriangleMesh) -> Bvh:
    """Median split on the longest centroid-extent axis, leaves of <= 4."""
    if len(mesh.faces) == 0:
        raise ValueError("cannot build a BVH over an empty mesh")
    tris = np.ascontiguousarray(mesh.triangles)
    tmin = tris.min(axis=1)
    tmax = tris.max(axis=1)
    cent = tris.mean(axis=1)
    perm = np.arange(len(tris))
    bmin, bmax, left, right, start, count = [], [], [], [], [], []
    max_depth = 0
    # explicit stack of (node id, lo, hi, depth)
    bmin.append(None)
    bmax.append(None)
    left.append(-1)
    right.append(-1)
    start.append(0)
    count.append(0)
    stack = [(0, 0, len(tris), 0)]
    while stack:
        node, lo, hi, depth = stack.pop()
        max_depth = max(max_depth, depth)
        ids = perm[lo:hi]
        bmin[node] = tmin[ids].min(axis=0)
        bmax[node] = tmax[ids].max(axis=0)
        n = hi - lo
        if n <= MAX_LEAF:
            start[node], count[node] = lo, n
            continue
        if depth >= MAX_DEPTH:
            raise RuntimeError("BVH depth limit exceeded")
        c = cent[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        order = np.argsort(c[:, axis], kind="stable")
        perm[lo:hi] = ids[order]
        mid = lo + n // 2
        kids = []
        for _ in range(2):
            bmin.append(None)
            bmax.append(None)
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)
            kids.append(len(left) - 1)
        left[node], right[node] = kids
        stack.append((kids[1], mid, hi, depth + 1))
        stack.append((kids[0], lo, mid, depth + 1))
    return Bvh(np.array(bmin), np.array(bmax), np.array(left, dtype=np.int64),
               np.array(right, dtype=np.int64), np.array(start, dtype=np.int64),
               np.array(count, dtype=np.int64), perm.astype(np.int64), tris, max_depth)


@numba.njit(cache=True)
def _ray_tri_t(ox, oy, oz, dx, dy, dz, v0, v1, v2):
    """Ray parameter of the hit, or inf."""
    e1x, e1y, e1z = v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2]
    e2x, e2y, e2z = v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-14:
        return np.inf
    inv = 1.0 / det
    tx, ty, tz = ox - v0[0], oy - v0[1], oz - v0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return t if t > T_EPS else np.inf


@numba.njit(cache=True)
def _ray_tri(ox, oy, oz, dx, dy, dz, v0, v1, v2, t_max):
    return _ray_tri_t(ox, oy, oz, dx, dy, dz, v0, v1, v2) < t_max


@numba.njit(cache=True)
def _box_hit(ox, oy, oz, ix, iy, iz, lo, hi, t_max):
    # slab test on precomputed inverse directions; NaN from 0 * inf leaves the
    # interval untouched, which only makes the cull more conservative
    t0 = 0.0
    t1 = t_max
    for a in range(3):
        if a == 0:
            o, inv = ox, ix
        elif a == 1:
            o, inv = oy, iy
        else:
            o, inv = oz, iz
        pad = 1e-9 * (1.0 + abs(lo[a]) + abs(hi[a]))
        ta = (lo[a] - pad - o) * inv
        tb = (hi[a] + pad - o) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return False
    return True


@numba.njit(cache=True)
def _trace(bmin, bmax, left, right, start, count, perm, tris, origins, dirs, t_max, out):
    stack = np.empty(128, dtype=np.int64)
    for r in range(origins.shape[0]):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx if dx != 0.0 else np.inf
        iy = 1.0 / dy if dy != 0.0 else np.inf
        iz = 1.0 / dz if dz != 0.0 else np.inf
        stack[0] = 0
        sp = 1
        hit = False
        while sp > 0 and not hit:
            sp -= 1
            node = stack[sp]
            if not _box_hit(ox, oy, oz, ix, iy, iz, bmin[node], bmax[node], t_max):
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    f = perm[k]
                    if _ray_tri(ox, oy, oz, dx, dy, dz, tris[f, 0], tris[f, 1], tris[f, 2], t_max):
                        hit = True
                        break
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        out[r] = hit


@numba.njit(cache=True)
def _closest(bmin, bmax, left, right, start, count, perm, tris, origins, dirs, t_max, out):
    stack = np.empty(128, dtype=np.int64)
    for r in range(origins.shape[0]):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx if dx != 0.0 else np.inf
        iy = 1.0 / dy if dy != 0.0 else np.inf
        iz = 1.0 / dz if dz != 0.0 else np.inf
        best = t_max
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _box_hit(ox, oy, oz, ix, iy, iz, bmin[node], bmax[node], best):
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    f = perm[k]
                    t = _ray_tri_t(ox, oy, oz, dx, dy, dz, tris[f, 0], tris[f, 1], tris[f, 2])
                    if t < best:
                        best = t
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        out[r] = best if best < t_max else np.inf


def first_hit(bvh: Bvh, origins, dirs, t_max=np.inf):
    """Ray parameter of the nearest triangle hit in (0, t_max), inf if none.

    Directions need not be unit length; ``t`` is in units of ``dirs``.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    origins, dirs = np.broadcast_arrays(origins, dirs)
    shape = dirs.shape[:-1]
    o = np.ascontiguousarray(origins.reshape(-1, 3))
    d = np.ascontiguousarray(dirs.reshape(-1, 3))
    out = np.full(len(d), np.inf)
    if len(d):
        _closest(bvh.bmin, bvh.bmax, bvh.left, bvh.right, bvh.start, bvh.count, bvh.perm,
                 bvh.tris, o, d, float(t_max), out)
    return out.reshape(shape)


def trace_occlusion(bvh: Bvh, origins, dirs, t_max):
    """Boolean occlusion for rays (broadcast over leading axes)."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    origins, dirs = np.broadcast_arrays(origins, dirs)
    shape = dirs.shape[:-1]
    o = np.ascontiguousarray(origins.reshape(-1, 3))
    d = np.ascontiguousarray(dirs.reshape(-1, 3))
    out = np.zeros(len(d), dtype=np.bool_)
    if len(d):
        _trace(bvh.bmin, bvh.bmax, bvh.left, bvh.right, bvh.start, bvh.count, bvh.perm,
               bvh.tris, o, d, float(t_max), out)
    return out.reshape(shape)


def _brute_hits(tris, origins, dirs, chunk):
    """Yield (row slice, (rows, F) ray parameters with inf for misses)."""
    tris = np.asarray(tris, dtype=np.float64)
    v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    for s in range(0, len(dirs), chunk):
        o = origins[s:s + chunk, None, :]
        d = dirs[s:s + chunk, None, :]
        dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
        px = dy * e2[:, 2] - dz * e2[:, 1]
        py = dz * e2[:, 0] - dx * e2[:, 2]
        pz = dx * e2[:, 1] - dy * e2[:, 0]
        det = e1[:, 0] * px + e1[:, 1] * py + e1[:, 2] * pz
        ok = np.abs(det) >= 1e-14
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            tx, ty, tz = o[..., 0] - v0[:, 0], o[..., 1] - v0[:, 1], o[..., 2] - v0[:, 2]
            u = (tx * px + ty * py + tz * pz) * inv
            qx = ty * e1[:, 2] - tz * e1[:, 1]
            qy = tz * e1[:, 0] - tx * e1[:, 2]
            qz = tx * e1[:, 1] - ty * e1[:, 0]
            v = (dx * qx + dy * qy + dz * qz) * inv
            t = (e2[:, 0] * qx + e2[:, 1] * qy + e2[:, 2] * qz) * inv
        hit = ok & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > T_EPS)
        yield slice(s, s + chunk), np.where(hit, t, np.inf)


def _flat_rays(origins, dirs):
    o_b, d_b = np.broadcast_arrays(np.asarray(origins, dtype=np.float64),
                                   np.asarray(dirs, dtype=np.float64))
    return o_b.reshape(-1, 3), d_b.reshape(-1, 3), d_b.shape[:-1]


def brute_force_occlusion(tris, origins, dirs, t_max, chunk: int = 64):
    """All-triangle Moller-Trumbore reference, vectorised in numpy."""
    o, d, shape = _flat_rays(origins, dirs)
    out = np.zeros(len(d), dtype=bool)
    for sl, t in _brute_hits(tris, o, d, chunk):
        out[sl] = (t < t_max).any(axis=1)
    return out.reshape(shape)


def brute_force_first_hit(tris, origins, dirs, t_max=np.inf, chunk: int = 64):
    """All-triangle reference for ``first_hit``."""
    o, d, shape = _flat_rays(origins, dirs)
    out = np.full(len(d), np.inf)
    for sl, t in _brute_hits(tris, o, d, chunk):
        m = t.min(axis=1)
        out[sl] = np.where(m < t_max, m, np.inf)
    return out.reshape(shape)


def scene_t_max(mesh: TriangleMesh) -> float:
    """Diameter of a bounding sphere around the mesh (bbox-centred)."""
    v = mesh.vertices
    c = 0.5 * (v.min(axis=0) + v.max(axis=0))
    return float(2.0 * np.linalg.norm(v - c, axis=1).max()) + 1e-6


def bake_directions(n_dirs: int):
    return fibonacci_sphere(n_dirs)


def bake_visibility(mu, normals, bvh: Bvh, t_max, n_dirs: int = 256, degree: int = 2):
    """Fit visibility SH per Gaussian; returns ``(coeffs (N, K), residual_rms (N,))``.

    Directions below a Gaussian's tangent plane take the value of their
    mirror image above it. Shading only looks at the upper hemisphere, and the
    smooth extension keeps the low-order fit from ringing at the horizon.
    """
    K = shlib.num_coeffs(degree)
    if n_dirs < K:
        raise ValueError(f"need at least {K} bake directions for degree {degree}, got {n_dirs}")
    dirs = bake_directions(n_dirs)
    B = shlib.basis(dirs, degree)
    if np.linalg.matrix_rank(B) < K:
        raise ValueError("rank-deficient bake direction set")
    mu = np.asarray(mu, dtype=np.float64)
    n = np.asarray(normals, dtype=np.float64)
    if len(mu) == 0:
        return np.zeros((0, K)), np.zeros(0)
    cosn = n @ dirs.T                                        # (N, S)
    below = cosn < 0
    mirrored = dirs[None] - 2.0 * np.where(below, cosn, 0.0)[..., None] * n[:, None, :]
    origins = mu + RAY_EPS * n
    vis = 1.0 - trace_occlusion(bvh, origins[:, None, :], mirrored, t_max).astype(np.float64)
    coeffs, *_ = np.linalg.lstsq(B, vis.T, rcond=None)       # (K, N)
    resid = B @ coeffs - vis.T
    return coeffs.T, np.sqrt(np.mean(resid ** 2, axis=0))


def finalize_bake(scene: HybridScene, bvh: Bvh | None = None, n_dirs: int = 256, degree: int = 2):
    """Copy of ``scene`` whose sh_aux holds baked visibility (all channels)."""
    from .splat_raster import gaussian_geometry

    if bvh is None:
        bvh = build_bvh(scene.mesh)
    geom = gaussian_geometry(scene)
    coeffs, resid = bake_visibility(geom.mu, geom.normal, bvh, scene_t_max(scene.mesh), n_dirs, degree)
    out = scene.copy()
    K = coeffs.shape[1]
    out.gaussians.sh_aux[:] = 0.0
    out.gaussians.sh_aux[:, :K, :] = coeffs[:, :, None]
    out.baked = True
    return out, resid
