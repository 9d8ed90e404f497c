"""Direction sampling: Fibonacci lattices, GGX half-vectors, environment maps.

Random numbers come from a counter-based hash so that the value drawn for a
given (seed, frame, pixel, sample, dimension) never depends on how pixels
are batched or scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _mix(x):
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def counter_uniform(seed, frame, pixel, sample, dim):
    """Uniform [0, 1) values keyed by integer counters (broadcasting)."""
    with np.errstate(over="ignore"):
        key = _mix(np.uint64(seed) * _GOLD + np.uint64(frame))
        h = _mix(key ^ (np.asarray(pixel, dtype=np.uint64) * _GOLD))
        h = _mix(h ^ (np.asarray(sample, dtype=np.uint64) * _M1))
        h = _mix(h + np.asarray(dim, dtype=np.uint64))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def _r_sequence_steps(dims: int):
    # generalised golden ratio: the real root of x^(dims+1) = x + 1
    phi = 2.0
    for _ in range(64):
        phi = (1.0 + phi) ** (1.0 / (dims + 1))
    return phi ** -np.arange(1, dims + 1, dtype=np.float64)


def shifted_lattice(seed, frame, pixel, n: int, dims: int, dim_offset: int = 0):
    """``dims`` arrays (P, n) of randomly shifted low-discrepancy points.

    Point j is (j/n, j a_1, ..., j a_{dims-1}) mod 1 shifted per pixel by a
    counter-keyed uniform vector (Cranley-Patterson rotation), so every
    coordinate is marginally uniform and estimators stay unbiased.
    """
    pix = np.asarray(pixel, dtype=np.uint64).reshape(-1, 1)
    j = np.arange(n, dtype=np.float64)[None, :]
    steps = _r_sequence_steps(dims)
    out = []
    for d in range(dims):
        base = j / n if d == 0 else j * steps[d - 1]
        shift = counter_uniform(seed, frame, pix, 0, dim_offset + d)
        out.append(np.mod(base + shift, 1.0))
    return out


@dataclass
class LightSample:
    """Sampled incident directions with their densities (sr^-1)."""

    wi: np.ndarray
    pdf: np.ndarray
    technique: str
    valid: np.ndarray | None = None


def onb(n):
    """Tangent, bitangent for unit normals ``n`` (..., 3); branchless frame.

    Plain arithmetic on the normal components, so it differentiates through
    ``autodiff.Var`` normals away from ``n_z == 0`` sign flips.
    """
    from . import autodiff as ad

    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    s = np.where(ad.value(nz) >= 0.0, 1.0, -1.0)
    a = -1.0 / (s + nz)
    b = nx * ny * a
    t = np.stack([1.0 + s * nx * nx * a, s * b, -s * nx], axis=-1)
    bt = np.stack([b, s + ny * ny * a, -ny], axis=-1)
    return t, bt


def to_world(local, n):
    """Rotate local directions (z = normal) into the frame of ``n``.

    ``local`` is (..., S, 3) and ``n`` is (..., 3).
    """
    t, b = onb(n)
    return (local[..., 0:1] * t[..., None, :] + local[..., 1:2] * b[..., None, :]
            + local[..., 2:3] * n[..., None, :])


def fibonacci_hemisphere_local(n: int, phase=0.0, offset=0.0):
    """Spiral lattice on the +z hemisphere; with no offset point 0 is the pole.

    ``phase`` (scalar or (P,)) rotates the lattice about z and ``offset`` in
    [0, 1) slides every point down by ``offset / n`` in z. With both drawn
    uniformly each direction is uniform on the hemisphere. Returns (n, 3) or
    (P, n, 3).
    """
    if n < 1:
        raise ValueError("need at least one direction")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (i + np.asarray(offset, dtype=np.float64)[..., None]) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * GOLDEN_ANGLE + np.asarray(phase, dtype=np.float64)[..., None]
    z, phi = np.broadcast_arrays(z, phi)
    r = np.broadcast_to(r, phi.shape)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def fibonacci_hemisphere(n: int, normal):
    """Fibonacci directions on the hemisphere around ``normal``.

    Each direction carries the uniform-set weight 1/n; as a density over the
    hemisphere that is 1/(2 pi).
    """
    normal = np.asarray(normal, dtype=np.float64)
    local = fibonacci_hemisphere_local(n)
    return to_world(local, normal)


def fibonacci_sphere(n: int):
    """Spiral lattice over the full sphere, (n, 3)."""
    if n < 1:
        raise ValueError("need at least one direction")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * GOLDEN_ANGLE
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


# -- GGX -----------------------------------------------------------------

def sample_ggx_half(alpha_g, u1, u2):
    """Local half-vectors distributed as D(h) (n.h)."""
    alpha_g = np.asarray(alpha_g, dtype=np.float64)
    a2 = alpha_g * alpha_g
    cos2 = (1.0 - u1) / (u1 * (a2 - 1.0) + 1.0)
    cos_t = np.sqrt(np.clip(cos2, 0.0, 1.0))
    sin_t = np.sqrt(np.clip(1.0 - cos2, 0.0, 1.0))
    phi = 2.0 * np.pi * u2
    return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1)


def ggx_pdf(alpha_g, n, wo, wi):
    """Solid-angle density of ``sample_ggx`` for direction ``wi``."""
    from .brdf import ggx_d

    hs = wi + wo
    hl = np.linalg.norm(hs, axis=-1, keepdims=True)
    h = hs / np.maximum(hl, 1e-12)
    nh = np.clip((n * h).sum(-1), 0.0, 1.0)
    ho = np.clip((h * wo).sum(-1), 0.0, 1.0)
    pdf = ggx_d(alpha_g, nh) * nh / np.maximum(4.0 * ho, 1e-12)
    return np.where(hl[..., 0] > 1e-9, pdf, 0.0)


def sample_ggx(alpha_g, n, wo, u1, u2):
    """Reflect ``wo`` about GGX half-vectors drawn around ``n``.

    Shapes: ``alpha_g`` (...), ``n``/``wo`` (..., 3), ``u1``/``u2`` (..., S).
    Samples ending below the surface are kept but flagged invalid; callers
    weight them by zero, which keeps the estimator unbiased.
    """
    alpha_g = np.asarray(alpha_g, dtype=np.float64)
    h_local = sample_ggx_half(alpha_g[..., None], u1, u2)
    h = to_world(h_local, n)
    wo_b = wo[..., None, :]
    ho = (h * wo_b).sum(-1, keepdims=True)
    wi = 2.0 * ho * h - wo_b
    wi /= np.linalg.norm(wi, axis=-1, keepdims=True)
    nb = n[..., None, :]
    pdf = ggx_pdf(alpha_g[..., None], nb, wo_b, wi)
    valid = ((wi * nb).sum(-1) > 0.0) & (pdf > 0.0)
    return LightSample(wi=wi, pdf=pdf, technique="ggx", valid=valid)


# -- environment map -----------------------------------------------------

def luminance(rgb):
    return rgb[..., 0] * 0.2126 + rgb[..., 1] * 0.7152 + rgb[..., 2] * 0.0722


def dir_to_uv(d):
    """Equirectangular coordinates; +Z maps to the image centre, +Y to row 0."""
    theta = np.arccos(np.clip(d[..., 1], -1.0, 1.0))
    phi = np.arctan2(d[..., 0], d[..., 2])
    u = (phi + np.pi) / (2.0 * np.pi)
    v = theta / np.pi
    return u, v


def uv_to_dir(u, v):
    phi = 2.0 * np.pi * u - np.pi
    theta = np.pi * v
    st = np.sin(theta)
    return np.stack([st * np.sin(phi), np.cos(theta), st * np.cos(phi)], axis=-1)


def texel_solid_angles(height: int, width: int):
    """Exact solid angle of each equirectangular texel, (H, W)."""
    edges = np.linspace(0.0, np.pi, height + 1)
    band = np.cos(edges[:-1]) - np.cos(edges[1:])
    return np.repeat((band * (2.0 * np.pi / width))[:, None], width, axis=1)


@dataclass
class EnvSampler:
    """Row/column cumulative tables for luminance * sin(theta) sampling."""

    texel_prob: np.ndarray  # (H, W), sums to 1
    row_cdf: np.ndarray     # (H,)
    col_cdf: np.ndarray     # (H, W)
    flat_cdf: np.ndarray    # col_cdf rows offset by row index, raveled

    @classmethod
    def build(cls, envmap):
        H, W = envmap.shape[:2]
        sin_t = np.sin((np.arange(H) + 0.5) * np.pi / H)
        w = luminance(envmap.astype(np.float64)) * sin_t[:, None]
        total = w.sum()
        if not total > 0:
            raise ValueError("environment map has zero luminance everywhere")
        prob = w / total
        row_mass = prob.sum(axis=1)
        row_cdf = np.cumsum(row_mass)
        row_cdf /= row_cdf[-1]
        col_cdf = np.cumsum(prob, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            col_cdf = np.where(row_mass[:, None] > 0, col_cdf / row_mass[:, None],
                               (np.arange(1, W + 1) / W)[None, :])
        col_cdf[:, -1] = 1.0
        # rows stacked as [r, r + 1] intervals give one global sorted table
        flat = (col_cdf + np.arange(H)[:, None]).ravel()
        return cls(texel_prob=prob, row_cdf=row_cdf, col_cdf=col_cdf, flat_cdf=flat)

    def pdf(self, d):
        """Solid-angle density for directions ``d`` (..., 3)."""
        H, W = self.texel_prob.shape
        u, v = dir_to_uv(d)
        row = np.clip((v * H).astype(np.int64), 0, H - 1)
        col = np.clip((u * W).astype(np.int64), 0, W - 1)
        sin_t = np.sin(v * np.pi)
        p_uv = self.texel_prob[row, col] * (H * W)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = p_uv / (2.0 * np.pi * np.pi * sin_t)
        return np.where(sin_t > 1e-12, out, 0.0)

    def sample(self, u1, u2, u3, u4):
        """Directions and densities from four uniform arrays of equal shape."""
        H, W = self.texel_prob.shape
        row = np.minimum(np.searchsorted(self.row_cdf, u1, side="right"), H - 1)
        col = np.searchsorted(self.flat_cdf, row + u2, side="right") - row * W
        col = np.clip(col, 0, W - 1)
        u = (col + u3) / W
        v = (row + u4) / H
        d = uv_to_dir(u, v)
        return d, self.pdf(d)


def sample_envmap(light, u1, u2, u3, u4):
    """Luminance-importance samples from ``light.envmap``."""
    if light.envmap is None:
        raise ValueError("no environment map loaded; use SH-only (fibonacci) shading")
    d, pdf = light.sampler.sample(u1, u2, u3, u4)
    return LightSample(wi=d, pdf=pdf, technique="light", valid=pdf > 0)


def mis_weight(pdf_this, pdf_other):
    """Balance heuristic for two techniques with equal sample counts."""
    pdf_this = np.asarray(pdf_this, dtype=np.float64)
    return pdf_this / (pdf_this + np.asarray(pdf_other, dtype=np.float64))
