"""Training objectives, their gradients, and a finite-difference checker.

Each term has a generic form (``*_term``) that runs on arrays or
``autodiff.Var``, and a public ``loss_*`` wrapper returning ``(value, grad)``
for a single input. ``total_loss`` differentiates the whole chain
parameters -> geometry -> G-buffer -> shading -> losses in one backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .hybrid_mesh import circumradius
from .postproc import tonemap_srgb
from .scene_model import Camera, HybridScene, TrainView
from .splat_raster import (PARAM_GROUPS, RenderPlan, gaussian_geometry, param_groups, pixel_rays,
                           render_deferred, rasterize_gbuffer)

O_CLAMP = 1.0 - 1e-6
TERMS = ("l1", "pbr", "smooth", "o", "sc", "sr", "normal")


@dataclass
class LossWeights:
    smooth_a: float = 0.06
    smooth_m: float = 0.02
    smooth_r: float = 0.02
    o: float = 1.0
    sc: float = 1.0
    sr: float = 1.0
    normal: float = 0.01
    kappa_rc: float = 0.2

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0")

    def term_weights(self, stage: str) -> dict:
        w = {"l1": 1.0, "pbr": 1.0, "smooth": 1.0, "o": self.o, "sc": self.sc, "sr": self.sr,
             "normal": self.normal}
        if stage == "stage2":
            w["pbr"] = 0.0
            w["smooth"] = 0.0
        return w


@dataclass
class LossReport:
    total: float
    terms: dict
    grads: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)


def _with_grad(fn, x, *args):
    xv = ad.Var(np.asarray(x, dtype=np.float64))
    out = fn(xv, *args)
    if not isinstance(out, ad.Var):
        return float(out), np.zeros_like(xv.value)
    ad.backward(out)
    g = xv.grad if xv.grad is not None else np.zeros_like(xv.value)
    return float(out.value), g


# -- opacity ------------------------------------------------------------------

def masked_opacity_term(o_map, mask):
    """Mean over pixels of -(1 - M) log(1 - o)."""
    o = np.clip(o_map, 0.0, O_CLAMP)
    bg = 1.0 - np.asarray(mask, dtype=np.float64)
    return (-(bg * np.log(1.0 - o))).mean()


def loss_masked_opacity(o_map, mask):
    return _with_grad(masked_opacity_term, o_map, mask)


# -- scale ----------------------------------------------------------------------

def scale_term(raw_scale, rc, kappa: float = 0.2):
    """Sum over Gaussians of max(max(s) - kappa * r_c, 0)."""
    s = np.exp(raw_scale)
    smax = np.maximum(np.maximum(s[:, 0], s[:, 1]), s[:, 2])
    excess = smax - kappa * np.asarray(rc)
    return np.where(ad.value(excess) > 0.0, excess, 0.0).sum()


def bound_circumradii(scene: HybridScene, vertices=None):
    """Circumradius of each Gaussian's triangle (0 for unbound Gaussians)."""
    v = scene.mesh.vertices if vertices is None else ad.value(vertices)
    g = scene.gaussians
    rc = np.zeros(len(g))
    b = g.tri_id >= 0
    if b.any():
        t = v[scene.mesh.faces[g.tri_id[b]]]
        rc[b] = circumradius(t[:, 0], t[:, 1], t[:, 2])
    return rc


def loss_scale(scene: HybridScene, kappa: float = 0.2):
    g = scene.gaussians
    b = g.tri_id >= 0
    rc = bound_circumradii(scene)[b]
    val, grad_b = _with_grad(scale_term, g.raw_scale[b], rc, kappa)
    grad = np.zeros_like(g.raw_scale)
    grad[b] = grad_b
    return val, grad


# -- surface --------------------------------------------------------------------------

def surface_term(mu, mu_init):
    d = mu - mu_init
    return (d * d).sum()


def loss_surface(scene: HybridScene):
    """Squared drift of bound centres from their binding positions; grad wrt vertices."""
    def fn(vertices):
        geom = gaussian_geometry(scene, {**param_groups(scene), "vertices": vertices})
        b = np.flatnonzero(scene.gaussians.tri_id >= 0)
        return surface_term(geom.mu[b], scene.gaussians.mu_init[b])

    return _with_grad(fn, scene.mesh.vertices)


# -- normals ---------------------------------------------------------------------------

def pseudo_normal_from_depth(depth, cam: Camera):
    """Normals from the back-projected depth map, facing the camera.

    Central differences inside, one-sided at the border; pixels where the
    tangents degenerate get the direction towards the camera.
    """
    depth = np.asarray(ad.value(depth), dtype=np.float64)
    H, W = depth.shape
    pix = np.arange(H * W)
    ray = pixel_rays(cam, pix).reshape(H, W, 3)
    P = cam.center + depth[..., None] * ray

    def diff(a, axis):
        n = a.shape[axis]
        if n < 2:
            return np.zeros_like(a)
        d = np.empty_like(a)
        sl = lambda s: tuple(s if i == axis else slice(None) for i in range(a.ndim))
        if n > 2:
            d[sl(slice(1, -1))] = 0.5 * (a[sl(slice(2, None))] - a[sl(slice(None, -2))])
        d[sl(slice(0, 1))] = a[sl(slice(1, 2))] - a[sl(slice(0, 1))]
        d[sl(slice(-1, None))] = a[sl(slice(-1, None))] - a[sl(slice(-2, -1))]
        return d

    tx = diff(P, 1)
    ty = diff(P, 0)
    n = np.cross(tx, ty)
    ln = np.linalg.norm(n, axis=-1, keepdims=True)
    to_cam = cam.center - P
    to_cam_n = to_cam / np.maximum(np.linalg.norm(to_cam, axis=-1, keepdims=True), 1e-300)
    view = -ray / np.linalg.norm(ray, axis=-1, keepdims=True)
    ok = ln[..., 0] > 1e-12
    n = np.where(ok[..., None], n / np.where(ln > 0, ln, 1.0), view)
    flip = (n * to_cam_n).sum(-1) < 0
    return np.where(flip[..., None], -n, n)


def normal_term(n_map, n_pseudo, mask):
    """Mean over masked pixels of -cos(n, n')."""
    nv = ad.value(n_map)
    ln = np.sqrt((nv * nv).sum(-1))
    m = np.asarray(mask).astype(bool) & (ln >= 1e-8)
    idx = np.flatnonzero(m)
    if len(idx) == 0:
        return 0.0
    n = ad.take(n_map.reshape(-1, 3), idx)
    npv = np.asarray(n_pseudo).reshape(-1, 3)[idx]
    cos = (n * npv).sum(-1) / ad.norm(n)
    return -cos.sum() * (1.0 / len(idx))


def loss_normal(n_map, n_pseudo, mask):
    return _with_grad(normal_term, n_map, n_pseudo, mask)


# -- smoothness -------------------------------------------------------------------------

def edge_weights(rgb, axis):
    """exp(-g) with g the larger neighbouring first difference (RGB mean)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    d = np.abs(np.diff(rgb, axis=axis)).mean(-1)
    n = rgb.shape[axis]
    if axis == 0:
        fwd, bwd = d[1:], d[:-1]
    else:
        fwd, bwd = d[:, 1:], d[:, :-1]
    g = np.maximum(fwd, bwd)
    return np.exp(-g) if n >= 3 else np.zeros(g.shape)


def smooth_term(param_map, rgb, mask):
    """Edge-aware second-difference penalty, masked mean over both axes.

    ``param_map`` is (H, W) or (H, W, C); channels are averaged.
    """
    x = param_map if ad.value(param_map).ndim == 3 else param_map[:, :, None]
    C = ad.value(x).shape[2]
    m = np.asarray(mask).astype(bool)
    total = 0.0
    count = 0
    for axis in (0, 1):
        if ad.value(x).shape[axis] < 3:
            continue
        if axis == 0:
            d2 = x[2:] - 2.0 * x[1:-1] + x[:-2]
            mm = m[1:-1]
        else:
            d2 = x[:, 2:] - 2.0 * x[:, 1:-1] + x[:, :-2]
            mm = m[:, 1:-1]
        w = edge_weights(rgb, axis) * mm
        total = total + (np.abs(d2) * (w[..., None] / C)).sum()
        count += int(mm.sum())
    if count == 0:
        return 0.0 * total if isinstance(total, ad.Var) else 0.0
    return total * (1.0 / count)


def loss_smooth(param_map, rgb, mask):
    return _with_grad(smooth_term, param_map, rgb, mask)


# -- photometric ---------------------------------------------------------------------------

def masked_l1(pred, gt, mask):
    if ad.value(pred).shape != np.shape(gt):
        raise ValueError("photometric loss: shape mismatch")
    m = np.asarray(mask, dtype=np.float64)
    cnt = m.sum() * ad.value(pred).shape[-1]
    if cnt == 0:
        return 0.0
    return (np.abs(pred - gt) * m[..., None]).sum() * (1.0 / cnt)


def photometric_term(pred_linear, gt_linear, mask):
    """L1 between sRGB-mapped (clipped) prediction and ground truth."""
    return masked_l1(tonemap_srgb(pred_linear), tonemap_srgb(np.asarray(gt_linear)), mask)


def loss_photometric(pred, gt, mask):
    return _with_grad(photometric_term, pred, gt, mask)


# -- full objective --------------------------------------------------------------------------

@dataclass
class EvalConfig:
    stage: str = "pbr"           # "stage2" or "pbr"
    spp: int = 32
    seed: int = 0
    frame: int = 0
    normalized: bool = False


def evaluate(scene: HybridScene, view: TrainView, params: dict, weights: LossWeights,
             cfg: EvalConfig, plan: RenderPlan | None = None, bvh=None, vis=None):
    """Weighted total and individual terms for one view (arrays or Var)."""
    cam = view.camera
    mask = view.mask
    gt_display = tonemap_srgb(view.image)
    tw = weights.term_weights(cfg.stage)
    terms = {}
    if tw["pbr"] > 0 or tw["smooth"] > 0:
        res = render_deferred(scene, cam, cfg.spp, "baked" if scene.baked else "train",
                              "fibonacci", cfg.seed, cfg.frame, params=params, plan=plan, vis=vis,
                              bvh=bvh, normalized=cfg.normalized, sh_global=params["sh_global"],
                              use_envmap=False)
        gb, plan = res.gbuffer, res.plan
        terms["pbr"] = masked_l1(tonemap_srgb(res.image), gt_display, mask)
        terms["smooth"] = (weights.smooth_a * smooth_term(gb.albedo, gt_display, mask)
                           + weights.smooth_m * smooth_term(gb.metalness, gt_display, mask)
                           + weights.smooth_r * smooth_term(gb.roughness, gt_display, mask))
    else:
        gb, plan, _, _ = rasterize_gbuffer(scene, cam, params, plan, cfg.normalized)
        terms["pbr"] = 0.0
        terms["smooth"] = 0.0
    terms["l1"] = masked_l1(gb.radiance, gt_display, mask)
    terms["o"] = masked_opacity_term(gb.opacity, mask)
    b = scene.gaussians.tri_id >= 0
    if "rc" not in plan.frozen:
        plan.frozen["rc"] = bound_circumradii(scene, params["vertices"])[b]
    rc = plan.frozen["rc"]
    terms["sc"] = scale_term(params["raw_scale"][np.flatnonzero(b)], rc, weights.kappa_rc)
    geom = gaussian_geometry(scene, params)
    bi = np.flatnonzero(b)
    terms["sr"] = surface_term(geom.mu[bi], scene.gaussians.mu_init[bi])
    ov = ad.value(gb.opacity)
    if "n_pseudo" not in plan.frozen:
        depth_n = ad.value(gb.depth) / np.where(ov > 0, ov, 1.0)
        plan.frozen["n_pseudo"] = pseudo_normal_from_depth(depth_n, cam)
    n_pseudo = plan.frozen["n_pseudo"]
    terms["normal"] = normal_term(gb.normal, n_pseudo, mask.astype(bool) & (ov > 0.5))
    total = 0.0
    for k in TERMS:
        if tw[k] != 0.0:
            total = total + tw[k] * terms[k]
    return total, terms, plan, tw


def total_loss(scene: HybridScene, view: TrainView, weights: LossWeights | None = None,
               cfg: EvalConfig | None = None, plan: RenderPlan | None = None, bvh=None, vis=None,
               groups=PARAM_GROUPS):
    """Loss terms and gradients for every parameter group in ``groups``."""
    weights = weights or LossWeights()
    cfg = cfg or EvalConfig()
    base = param_groups(scene)
    params = {k: (ad.Var(v) if k in groups else v) for k, v in base.items()}
    total, terms, plan, tw = evaluate(scene, view, params, weights, cfg, plan, bvh, vis)
    term_vals = {k: float(ad.value(v)) for k, v in terms.items()}
    for k, v in term_vals.items():
        if not np.isfinite(v):
            raise FloatingPointError(f"non-finite loss term '{k}'")
    if isinstance(total, ad.Var):
        ad.backward(total)
    grads = {}
    for k in groups:
        gval = params[k].grad
        grads[k] = np.zeros_like(base[k]) if gval is None else gval
    report = LossReport(total=float(ad.value(total)), terms=term_vals, grads=grads, weights=tw)
    report.plan = plan
    return report


def check_gradients(scene: HybridScene, view: TrainView, groups=PARAM_GROUPS, h: float = 1e-5,
                    weights: LossWeights | None = None, cfg: EvalConfig | None = None,
                    max_per_group: int | None = None, rng_seed: int = 0, richardson: bool = True,
                    atol: float = 1e-6):
    """Worst relative error between analytic and central-difference gradients.

    The render plan (fragments, foreground set, traced visibility and the
    per-pixel sample pattern) is frozen after the first evaluation, so both
    sides differentiate the same function. Returns ``{group: max_rel_err}``.

    Components whose gradient is below ``atol * max(1, |total|)`` are compared
    against that floor, since central differences cannot resolve them.
    """
    weights = weights or LossWeights()
    cfg = cfg or EvalConfig()
    rep = total_loss(scene, view, weights, cfg, groups=groups)
    plan = rep.plan
    base = param_groups(scene)
    rng = np.random.default_rng(rng_seed)

    def f(group, flat_idx, delta):
        p = {k: v for k, v in base.items()}
        arr = base[group].copy()
        arr.reshape(-1)[flat_idx] += delta
        p[group] = arr
        tot, *_ = evaluate(scene, view, p, weights, cfg, plan)
        return float(ad.value(tot))

    floor = atol * max(1.0, abs(rep.total))
    out = {}
    for gname in groups:
        ga = rep.grads[gname].reshape(-1)
        n = ga.size
        idx = np.arange(n)
        if max_per_group is not None and n > max_per_group:
            idx = np.sort(rng.choice(n, max_per_group, replace=False))
        worst = 0.0
        for i in idx:
            fd = (f(gname, i, h) - f(gname, i, -h)) / (2 * h)
            if richardson:
                fd2 = (f(gname, i, h / 2) - f(gname, i, -h / 2)) / h
                fd = (4.0 * fd2 - fd) / 3.0
            err = abs(ga[i] - fd) / max(abs(ga[i]), abs(fd), floor)
            worst = max(worst, err)
        out[gname] = worst
    return out
