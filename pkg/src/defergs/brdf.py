"""Diffuse + GGX microfacet BRDF.

All functions are elementwise and accept numpy arrays or ``autodiff.Var``.
Vectors live on the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

ROUGHNESS_MIN = 0.09
DIELECTRIC_F0 = 0.04
DENOM_EPS = 1e-6


def _dot(a, b):
    return (a * b).sum(axis=-1)


@dataclass
class BrdfParams:
    """Activated BRDF parameters (arrays broadcast over shading points)."""

    albedo: np.ndarray
    roughness: np.ndarray
    metalness: np.ndarray

    @property
    def alpha_g(self):
        return self.roughness * self.roughness

    @property
    def f0(self):
        m = self.metalness[..., None] if np.ndim(self.metalness) == np.ndim(self.albedo) - 1 else self.metalness
        return DIELECTRIC_F0 * (1.0 - m) + self.albedo * m


def ggx_d(alpha_g, n_dot_h):
    a2 = alpha_g * alpha_g
    t = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0
    return a2 / (np.pi * t * t)


def fresnel(f0, h_dot):
    return f0 + (1.0 - f0) * (1.0 - h_dot) ** 5


def smith_lambda(alpha_g, c):
    c2 = c * c
    return (np.sqrt(1.0 + alpha_g * alpha_g * (1.0 - c2) / c2) - 1.0) * 0.5


def smith_lambda_printed(alpha_g, c):
    """Reciprocal form as typeset in the reference text (diverges at c = 1)."""
    c2 = c * c
    return 1.0 / (2.0 * (np.sqrt(1.0 + alpha_g * (1.0 - c2) / c2) - 1.0))


def smith_g(alpha_g, n_dot_i, n_dot_o):
    """Height-correlated Smith G. Returns 0 where either cosine is <= 0."""
    ni = np.maximum(n_dot_i, DENOM_EPS)
    no = np.maximum(n_dot_o, DENOM_EPS)
    g = 1.0 / (1.0 + smith_lambda(alpha_g, ni) + smith_lambda(alpha_g, no))
    valid = (ad.value(n_dot_i) > 0) & (ad.value(n_dot_o) > 0)
    return np.where(valid, g, 0.0)


def lambertian_brdf(albedo, roughness, metalness, n, wi, wo, printed_forms=False):
    """Pure diffuse ``albedo / pi`` with the same signature as ``eval_brdf``."""
    valid = (ad.value(_dot(n, wi)) > 0) & (ad.value(_dot(n, wo)) > 0)
    return np.where(valid[..., None], albedo / np.pi, 0.0)


def eval_brdf(albedo, roughness, metalness, n, wi, wo, printed_forms=False):
    """f(wo, wi) for unit vectors ``n``, ``wi``, ``wo`` (shape ``(..., 3)``).

    ``albedo`` is ``(..., 3)``; ``roughness`` and ``metalness`` are ``(...)``.
    Returns ``(..., 3)``; zero when either direction is below the surface.
    ``printed_forms`` switches Fresnel to ``h.n`` and Smith to the reciprocal
    lambda, for ablation only.
    """
    alpha_g = roughness * roughness
    m = metalness[..., None]
    f0 = DIELECTRIC_F0 * (1.0 - m) + albedo * m

    ni = _dot(n, wi)
    no = _dot(n, wo)
    hs = wi + wo
    hlen = np.sqrt(np.maximum(_dot(hs, hs), 1e-24))
    h = hs / hlen[..., None]
    nh = np.clip(_dot(n, h), 0.0, 1.0)
    ho = np.clip(_dot(h, wo), 0.0, 1.0)

    nic = np.maximum(ni, DENOM_EPS)
    noc = np.maximum(no, DENOM_EPS)
    D = ggx_d(alpha_g, nh)
    if printed_forms:
        F = fresnel(f0, nh[..., None])
        lam = smith_lambda_printed
        # the printed lambda is infinite at normal incidence
        nic = np.minimum(nic, 1.0 - 1e-9)
        noc = np.minimum(noc, 1.0 - 1e-9)
    else:
        F = fresnel(f0, ho[..., None])
        lam = smith_lambda
    G = 1.0 / (1.0 + lam(alpha_g, nic) + lam(alpha_g, noc))
    spec_scalar = D * G / np.maximum(4.0 * nic * noc, DENOM_EPS)
    spec_scalar = np.where(ad.value(hlen) > 1e-9, spec_scalar, 0.0)
    diffuse = (1.0 - m) / np.pi * albedo
    f = diffuse + F * spec_scalar[..., None]
    valid = (ad.value(ni) > 0) & (ad.value(no) > 0)
    return np.where(valid[..., None], f, 0.0)
