"""Incoming-light model and Monte-Carlo shading at surface points.

Incoming radiance is ``V * L_global + max(0, L_local)``. During training V is
a traced binary hit test (never differentiated), L_global comes from the
light's SH coefficients (or the environment map when relighting) and L_local
from the per-pixel blended auxiliary SH. After baking, the auxiliary SH holds
visibility instead and L_local is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import sh as shlib
from .brdf import eval_brdf
from .sampling import (LightSample, counter_uniform, fibonacci_hemisphere_local, ggx_pdf,
                       mis_weight, sample_envmap, sample_ggx, shifted_lattice, to_world)
from .sampling import fibonacci_hemisphere, sample_ggx_half  # noqa: F401  (re-export)
from .sh import sh_eval, sh_project  # noqa: F401  (re-export)

RAY_EPS = 1e-3
TWO_PI = 2.0 * np.pi


@dataclass
class ShadingPoint:
    """Batch of P shading points; BRDF fields may be ``autodiff.Var``."""

    x: np.ndarray        # (P, 3)
    n: np.ndarray        # (P, 3) unit
    albedo: np.ndarray   # (P, 3)
    roughness: np.ndarray  # (P,)
    metalness: np.ndarray  # (P,)
    wo: np.ndarray       # (P, 3) unit, towards the viewer
    aux_sh: np.ndarray   # (P, 9, 3)

    def __len__(self):
        return len(ad.value(self.x))


class TracedVisibility:
    """Binary visibility from a triangle BVH."""

    def __init__(self, bvh, t_max):
        self.bvh = bvh
        self.t_max = t_max

    def visible(self, x, n, wi):
        from .visibility import trace_occlusion

        origins = (x + RAY_EPS * n)[:, None, :]
        return 1.0 - trace_occlusion(self.bvh, origins, wi, self.t_max).astype(np.float64)


class NoOcclusion:
    def visible(self, x, n, wi):
        return np.ones(wi.shape[:-1])


def incoming_light(sp: ShadingPoint, wi, light, vis=None, mode: str = "train",
                   use_envmap: bool = False, sh_global=None, vis_values=None):
    """Radiance arriving at each point from directions ``wi`` (P, S, 3).

    ``vis`` is a visibility source (``TracedVisibility``/``NoOcclusion``);
    ``vis_values`` (P, S) overrides tracing with precomputed hit results.
    ``sh_global`` overrides ``light.sh_global`` (e.g. a differentiable copy).
    Returns ``(L, V)`` with ``L`` of shape (P, S, 3).
    """
    wv = ad.value(wi)
    Y = shlib.basis(wi, 2)                           # (P, S, 9)
    if mode == "baked":
        aux0 = ad.value(sp.aux_sh)[..., 0]           # visibility is channel-replicated
        V = np.clip((ad.value(Y) * aux0[:, None, :]).sum(-1), 0.0, 1.0)
        L_local = 0.0
    elif mode == "train":
        if vis_values is not None:
            V = vis_values
        else:
            V = (vis or NoOcclusion()).visible(ad.value(sp.x), ad.value(sp.n), wv)
        L_local = np.maximum(Y @ sp.aux_sh, 0.0)
    else:
        raise ValueError(f"unknown shading mode {mode!r}")
    if use_envmap:
        Lg = light.lookup(wv)
    else:
        coeffs = light.sh_global if sh_global is None else sh_global
        Lg = np.maximum(Y @ coeffs, 0.0)
    return V[..., None] * Lg + L_local, V


def _brdf_cos(sp: ShadingPoint, wi, printed_forms=False, brdf=None):
    f = (brdf or eval_brdf)(sp.albedo[:, None, :], sp.roughness[:, None], sp.metalness[:, None],
                  sp.n[:, None, :], wi, sp.wo[:, None, :], printed_forms)
    cos = np.maximum((ad.value(sp.n)[:, None, :] * ad.value(wi)).sum(-1), 0.0)
    return f, cos


def shade(sp: ShadingPoint, light, spp: int, strategy: str = "fibonacci", vis=None,
          mode: str = "train", seed: int = 0, frame: int = 0, pixel_ids=None,
          use_envmap: bool | None = None, sh_global=None, vis_values=None,
          printed_forms: bool = False, brdf=None):
    """Outgoing radiance towards ``sp.wo``; returns ``(rgb (P, 3), V (P, S))``.

    ``fibonacci``: the spiral set over the normal's hemisphere with density
    1/(2 pi), rotated and slid in z per pixel so it is unbiased. ``mis``: spp/2 environment-map
    samples plus spp/2 GGX samples, balance-heuristic weighted, each drawn
    from a per-pixel shifted lattice. ``light`` and ``ggx`` spend all spp on
    one of those techniques (single-strategy reference estimators). ``brdf``
    replaces ``eval_brdf`` (same signature), e.g. ``lambertian_brdf``.
    """
    if spp < 1:
        raise ValueError("spp must be >= 1")
    P = len(sp)
    if pixel_ids is None:
        pixel_ids = np.arange(P)
    pixel_ids = np.asarray(pixel_ids, dtype=np.uint64)
    if use_envmap is None:
        use_envmap = light.envmap is not None and strategy == "mis"
    if P == 0:
        return np.zeros((0, 3)), np.zeros((0, spp))
    nv = ad.value(sp.n)
    front = (nv * ad.value(sp.wo)).sum(-1) > 0.0

    if strategy == "fibonacci":
        phase = TWO_PI * counter_uniform(seed, frame, pixel_ids, 0, 0)
        offset = counter_uniform(seed, frame, pixel_ids, 0, 1)
        local = fibonacci_hemisphere_local(spp, phase, offset)     # (P, S, 3)
        wi = to_world(local, sp.n)
        L, V = incoming_light(sp, wi, light, vis, mode, use_envmap, sh_global, vis_values)
        f, cos = _brdf_cos(sp, wi, printed_forms, brdf)
        contrib = ad.nan_to_zero(L * f * cos[..., None])
        rgb = contrib.sum(axis=1) * (TWO_PI / spp)
    elif strategy in ("mis", "light", "ggx"):
        if light.envmap is None:
            raise ValueError(f"{strategy} strategy needs an environment map; use fibonacci with SH light")
        if strategy == "mis":
            n_l = max(1, spp // 2)
            n_b = max(1, spp - n_l)
        else:
            n_l, n_b = (spp, 0) if strategy == "light" else (0, spp)
        alpha_g = ad.value(sp.roughness) ** 2
        wo_v = ad.value(sp.wo)
        techniques = []
        if n_l:
            u = shifted_lattice(seed, frame, pixel_ids, n_l, 4, dim_offset=1)
            techniques.append((sample_envmap(light, *u), n_l, slice(0, n_l)))
        if n_b:
            ub = shifted_lattice(seed, frame, pixel_ids, n_b, 2, dim_offset=5)
            techniques.append((sample_ggx(alpha_g, nv, wo_v, *ub), n_b, slice(n_l, n_l + n_b)))
        rgb, Vs = 0.0, []
        for smp, n_t, cols in techniques:
            wi = smp.wi
            p_this = smp.pdf
            if strategy != "mis":
                w = 1.0
            elif smp.technique == "light":
                w = mis_weight(p_this, ggx_pdf(alpha_g[:, None], nv[:, None, :], wo_v[:, None, :], wi))
            else:
                w = mis_weight(p_this, light.sampler.pdf(wi))
            ok = smp.valid & (p_this > 0)
            scale = np.where(ok, w / np.where(ok, p_this, 1.0), 0.0) / n_t
            L, V = incoming_light(sp, wi, light, vis, mode, True, sh_global,
                                  None if vis_values is None else vis_values[:, cols])
            f, cos = _brdf_cos(sp, wi, printed_forms, brdf)
            rgb = rgb + ad.nan_to_zero(L * f * (cos * scale)[..., None]).sum(axis=1)
            Vs.append(V)
        V = np.concatenate(Vs, axis=1)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    rgb = np.where(front[:, None], rgb, 0.0)
    rgb = ad.nan_to_zero(rgb)
    return np.maximum(rgb, 0.0), V


__all__ = ["ShadingPoint", "LightSample", "TracedVisibility", "NoOcclusion", "incoming_light",
           "shade", "sh_eval", "sh_project", "fibonacci_hemisphere", "sample_ggx", "sample_envmap",
           "mis_weight"]
