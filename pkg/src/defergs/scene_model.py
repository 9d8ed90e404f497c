"""Scene-level types: Gaussians, meshes, cameras, lights and training views.

Gaussians are stored structure-of-arrays with *raw* (pre-activation)
parameters; activated values are derived on demand.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .sampling import EnvSampler

RADIANCE_SH = 16  # degree 3
AUX_SH = 9        # degree 2
ROUGH_MIN = 0.09


class SceneError(ValueError):
    """Invalid scene data (bad counts, non-finite values, broken binding)."""


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize(v):
    return v / np.sqrt((v * v).sum(axis=-1, keepdims=True))


def quat_to_matrix(q):
    """Rotation matrices (..., 3, 3) from unit quaternions (w, x, y, z)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def matrix_to_quat(R):
    """Unit quaternions (w, x, y, z) with w >= 0 from rotation matrices."""
    R = np.asarray(R, dtype=np.float64)
    m = R.reshape(-1, 3, 3)
    m00, m01, m02 = m[:, 0, 0], m[:, 0, 1], m[:, 0, 2]
    m10, m11, m12 = m[:, 1, 0], m[:, 1, 1], m[:, 1, 2]
    m20, m21, m22 = m[:, 2, 0], m[:, 2, 1], m[:, 2, 2]
    tr = m00 + m11 + m22
    # one candidate per branch of Shepperd's method; pick the best-conditioned
    cands = np.stack([
        np.stack([1.0 + tr, m21 - m12, m02 - m20, m10 - m01], -1),
        np.stack([m21 - m12, 1.0 + m00 - m11 - m22, m01 + m10, m02 + m20], -1),
        np.stack([m02 - m20, m01 + m10, 1.0 + m11 - m00 - m22, m12 + m21], -1),
        np.stack([m10 - m01, m02 + m20, m12 + m21, 1.0 + m22 - m00 - m11], -1),
    ], 1)
    big = np.stack([tr, m00, m11, m22], -1)
    pick = np.where(tr > 0, 0, 1 + np.argmax(big[:, 1:], axis=1))
    q = cands[np.arange(len(m)), pick]
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    q = np.where(q[:, :1] < 0, -q, q)
    return q.reshape(R.shape[:-2] + (4,))


# -- activations --------------------------------------------------------------

@dataclass
class Activated:
    alpha: np.ndarray
    scale: np.ndarray
    albedo: np.ndarray
    roughness: np.ndarray
    metalness: np.ndarray
    q_shape: np.ndarray
    q_normal: np.ndarray


def activate_params(raw_alpha, raw_scale, raw_albedo, raw_rough, raw_metal,
                    q_shape, q_normal) -> Activated:
    """Map unconstrained raw parameters to their constrained ranges.

    Works on numpy arrays and on ``autodiff.Var``.
    """
    return Activated(
        alpha=sigmoid(raw_alpha),
        scale=np.exp(raw_scale),
        albedo=sigmoid(raw_albedo),
        roughness=ROUGH_MIN + (1.0 - ROUGH_MIN) * sigmoid(raw_rough),
        metalness=sigmoid(raw_metal),
        q_shape=normalize(q_shape),
        q_normal=normalize(q_normal),
    )


# -- Gaussians ----------------------------------------------------------------

@dataclass
class Gaussian3D:
    """A single splat with activated parameters (read-only view)."""

    mu: np.ndarray
    q_shape: np.ndarray
    s: np.ndarray
    alpha: float
    sh_rgb: np.ndarray
    a: np.ndarray
    r: float
    m: float
    q_normal: np.ndarray
    sh_aux: np.ndarray
    tri_id: int | None
    mu_init: np.ndarray


@dataclass
class Gaussians:
    """Structure-of-arrays container of raw Gaussian parameters."""

    mu: np.ndarray          # (N, 3)
    q_shape: np.ndarray     # (N, 4) w, x, y, z
    raw_scale: np.ndarray   # (N, 3)
    raw_alpha: np.ndarray   # (N,)
    sh_rgb: np.ndarray      # (N, 16, 3)
    raw_albedo: np.ndarray  # (N, 3)
    raw_rough: np.ndarray   # (N,)
    raw_metal: np.ndarray   # (N,)
    q_normal: np.ndarray    # (N, 4)
    sh_aux: np.ndarray      # (N, 9, 3)
    tri_id: np.ndarray      # (N,) int, -1 when unbound
    mu_init: np.ndarray     # (N, 3)

    @classmethod
    def empty(cls, n: int = 0) -> "Gaussians":
        q = np.zeros((n, 4))
        q[:, 0] = 1.0
        return cls(
            mu=np.zeros((n, 3)), q_shape=q.copy(), raw_scale=np.zeros((n, 3)),
            raw_alpha=np.zeros(n), sh_rgb=np.zeros((n, RADIANCE_SH, 3)),
            raw_albedo=np.zeros((n, 3)), raw_rough=np.zeros(n), raw_metal=np.zeros(n),
            q_normal=q.copy(), sh_aux=np.zeros((n, AUX_SH, 3)),
            tri_id=np.full(n, -1, dtype=np.int64), mu_init=np.zeros((n, 3)),
        )

    def __len__(self):
        return len(self.raw_alpha)

    def copy(self) -> "Gaussians":
        return copy.deepcopy(self)

    def concat(self, other: "Gaussians") -> "Gaussians":
        return Gaussians(**{f.name: np.concatenate([getattr(self, f.name), getattr(other, f.name)])
                            for f in fields(self)})

    def subset(self, idx) -> "Gaussians":
        return Gaussians(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def activated(self) -> Activated:
        return activate_params(self.raw_alpha, self.raw_scale, self.raw_albedo,
                               self.raw_rough, self.raw_metal, self.q_shape, self.q_normal)

    def splat(self, i: int) -> Gaussian3D:
        act = self.activated()
        t = int(self.tri_id[i])
        return Gaussian3D(
            mu=self.mu[i].copy(), q_shape=act.q_shape[i], s=act.scale[i], alpha=float(act.alpha[i]),
            sh_rgb=self.sh_rgb[i].copy(), a=act.albedo[i], r=float(act.roughness[i]),
            m=float(act.metalness[i]), q_normal=act.q_normal[i], sh_aux=self.sh_aux[i].copy(),
            tri_id=None if t < 0 else t, mu_init=self.mu_init[i].copy(),
        )

    def validate(self):
        n = len(self)
        for f in fields(self):
            arr = getattr(self, f.name)
            if len(arr) != n:
                raise SceneError(f"Gaussian field {f.name} has {len(arr)} rows, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise SceneError(f"non-finite values in Gaussian field {f.name}")
        for name in ("q_shape", "q_normal"):
            if n and np.any(np.linalg.norm(getattr(self, name), axis=1) < 1e-12):
                raise SceneError(f"zero-length quaternion in {name}")


# -- mesh, camera, light ----------------------------------------------------

@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray     # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def triangles(self):
        return self.vertices[self.faces]

    def face_areas(self):
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self):
        t = self.triangles
        return normalize(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]))

    def validate(self, min_area=1e-12):
        if not np.all(np.isfinite(self.vertices)):
            raise SceneError("non-finite mesh vertices")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise SceneError("face index out of range")
        if len(self.faces) and np.any(self.face_areas() <= min_area):
            raise SceneError("degenerate face in mesh")

    def copy(self):
        return TriangleMesh(self.vertices.copy(), self.faces.copy())


@dataclass
class Camera:
    """Pinhole camera; x right, y down, z forward in camera space."""

    R: np.ndarray  # world-to-camera rotation (3, 3)
    t: np.ndarray  # world-to-camera translation (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError("focal lengths must be positive")
        if not self.near < self.far:
            raise SceneError("near must be < far")
        if self.width < 1 or self.height < 1:
            raise SceneError("image size must be >= 1")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), fov_deg=40.0, width=64, height=64,
                near=0.01, far=100.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = normalize(np.asarray(target, dtype=np.float64) - eye)
        up = np.asarray(up, dtype=np.float64)
        if abs(np.dot(fwd, normalize(up))) > 0.999:
            up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = normalize(np.cross(fwd, up))
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(R=R, t=-R @ eye, fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2,
                   width=width, height=height, near=near, far=far)

    @property
    def center(self):
        return -self.R.T @ self.t

    def pixel_rays(self, px, py):
        """Unnormalised world-space ray directions with camera-z = 1."""
        d_cam = np.stack([(px - self.cx) / self.fx, (py - self.cy) / self.fy,
                          np.ones_like(px, dtype=np.float64)], axis=-1)
        return d_cam @ self.R

    def to_camera(self, x):
        return x @ self.R.T + self.t


@dataclass
class EnvironmentLight:
    """SH light used in training plus an optional equirectangular HDR map."""

    sh_global: np.ndarray = field(default_factory=lambda: np.zeros((AUX_SH, 3)))
    envmap: np.ndarray | None = None
    _sampler: EnvSampler | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.sh_global = np.asarray(self.sh_global, dtype=np.float64).reshape(AUX_SH, 3)
        if self.envmap is not None:
            env = np.asarray(self.envmap, dtype=np.float32)
            if env.ndim != 3 or env.shape[2] != 3:
                raise SceneError("envmap must be H x W x 3")
            if not np.all(np.isfinite(env)) or np.any(env < 0):
                raise SceneError("envmap values must be finite and >= 0")
            self.envmap = env

    @property
    def sampler(self) -> EnvSampler:
        if self.envmap is None:
            raise SceneError("no environment map loaded; use SH-only shading")
        if self._sampler is None:
            self._sampler = EnvSampler.build(self.envmap)
        return self._sampler

    def lookup(self, d):
        """Nearest-texel radiance for directions ``d`` (..., 3)."""
        from .sampling import dir_to_uv

        H, W = self.envmap.shape[:2]
        u, v = dir_to_uv(d)
        row = np.clip((v * H).astype(np.int64), 0, H - 1)
        col = np.clip((u * W).astype(np.int64), 0, W - 1)
        return self.envmap[row, col].astype(np.float64)

    def copy(self):
        return EnvironmentLight(self.sh_global.copy(),
                                None if self.envmap is None else self.envmap.copy())


@dataclass
class TrainView:
    image: np.ndarray   # (H, W, 3) linear RGB
    mask: np.ndarray    # (H, W) in {0, 1}
    camera: Camera

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        H, W = self.camera.height, self.camera.width
        if self.image.shape != (H, W, 3) or self.mask.shape != (H, W):
            raise SceneError("view dimensions do not match the camera")
        if not np.all(np.isfinite(self.image)) or np.any(self.image < 0):
            raise SceneError("view image must be finite and >= 0")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise SceneError("mask must be binary")


@dataclass
class HybridScene:
    mesh: TriangleMesh
    gaussians: Gaussians
    light: EnvironmentLight = field(default_factory=EnvironmentLight)
    bvh_dirty: bool = True
    baked: bool = False

    @property
    def fully_bound(self) -> bool:
        n = len(self.gaussians)
        return n == len(self.mesh.faces) and n > 0 and np.array_equal(
            self.gaussians.tri_id, np.arange(n))

    def validate(self):
        self.mesh.validate(min_area=0.0)
        self.gaussians.validate()
        tri = self.gaussians.tri_id
        if np.any(tri >= len(self.mesh.faces)) or np.any(tri < -1):
            raise SceneError("binding mismatch: tri_id out of range")
        act = self.gaussians.activated()
        for name, lo, hi in (("alpha", 0, 1), ("albedo", 0, 1), ("metalness", 0, 1),
                             ("roughness", ROUGH_MIN, 1)):
            arr = getattr(act, name)
            if np.any(arr < lo) or np.any(arr > hi):
                raise SceneError(f"{name} outside [{lo}, {hi}]")
        if np.any(act.scale <= 0):
            raise SceneError("scales must be positive")

    def copy(self) -> "HybridScene":
        return HybridScene(self.mesh.copy(), self.gaussians.copy(), self.light.copy(),
                           self.bvh_dirty, self.baked)


__all__ = [
    "SceneError", "Activated", "activate_params", "Gaussian3D", "Gaussians", "TriangleMesh",
    "Camera", "EnvironmentLight", "TrainView", "HybridScene", "sigmoid", "logit",
    "quat_to_matrix", "matrix_to_quat", "normalize", "ad",
]
