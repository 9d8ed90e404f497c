"""Splat projection, per-pixel sorted blending into G-buffers, and the two
render paths: per-Gaussian (forward) shading and deferred shading.

The pipeline is split in two. ``build_plan`` decides, from plain values,
which (pixel, Gaussian) fragments exist and in what order; the blend then
evaluates the fragment opacities and weighted sums on arrays or
``autodiff.Var`` inputs. Holding a plan fixed turns the render into a smooth
function of the parameters, which is what gradient checks need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import sh as shlib
from .hybrid_mesh import reference_edges, rotated_normal, triangle_frames
from .lighting import ShadingPoint, TracedVisibility, shade
from .scene_model import Camera, Gaussian3D, HybridScene, activate_params, quat_to_matrix

COV_DILATION = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
TAU_FG = 0.5

# G-buffer channel layout
CH_O, CH_D = 0, 1
CH_N = slice(2, 5)
CH_A = slice(5, 8)
CH_R, CH_M = 8, 9
CH_RAD = slice(10, 13)
CH_AUX = slice(13, 40)
N_CH = 40

PARAM_GROUPS = ("vertices", "raw_alpha", "raw_scale", "raw_albedo", "raw_rough", "raw_metal",
                "q_normal", "sh_rgb", "sh_aux", "sh_global")


def param_groups(scene: HybridScene) -> dict:
    """Copies of every learnable parameter group."""
    g = scene.gaussians
    return {
        "vertices": scene.mesh.vertices.copy(),
        "raw_alpha": g.raw_alpha.copy(),
        "raw_scale": g.raw_scale.copy(),
        "raw_albedo": g.raw_albedo.copy(),
        "raw_rough": g.raw_rough.copy(),
        "raw_metal": g.raw_metal.copy(),
        "q_normal": g.q_normal.copy(),
        "sh_rgb": g.sh_rgb.copy(),
        "sh_aux": g.sh_aux.copy(),
        "sh_global": scene.light.sh_global.copy(),
    }


def apply_params(scene: HybridScene, params: dict) -> HybridScene:
    """Write parameter groups back into ``scene`` (in place) and resync."""
    from .hybrid_mesh import sync_bound

    g = scene.gaussians
    if "vertices" in params:
        scene.mesh.vertices = np.array(ad.value(params["vertices"]), dtype=np.float64)
    for k in ("raw_alpha", "raw_scale", "raw_albedo", "raw_rough", "raw_metal", "q_normal",
              "sh_rgb", "sh_aux"):
        if k in params:
            setattr(g, k, np.array(ad.value(params[k]), dtype=np.float64))
    if "sh_global" in params:
        scene.light.sh_global = np.array(ad.value(params["sh_global"]), dtype=np.float64)
    sync_bound(scene)
    return scene


@dataclass
class Geometry:
    """Per-Gaussian render attributes (arrays or Var)."""

    mu: object
    rot: object
    scale: object
    normal: object
    alpha: object
    albedo: object
    roughness: object
    metalness: object
    sh_rgb: object
    sh_aux: object
    face_normal: object = None


def gaussian_geometry(scene: HybridScene, params: dict | None = None, ref_edges=None) -> Geometry:
    """Derive centres, frames and activated attributes from parameter groups.

    Bound Gaussians take centre and frame from their triangle; unbound ones use
    their stored position and shape quaternion.
    """
    p = param_groups(scene) if params is None else params
    g = scene.gaussians
    N = len(g)
    bound = np.flatnonzero(g.tri_id >= 0)
    free = np.flatnonzero(g.tri_id < 0)
    parts_mu, parts_rot, parts_n = [], [], []
    if len(bound):
        if ref_edges is None:
            ref_edges = reference_edges(scene)
        fidx = scene.mesh.faces[g.tri_id[bound]]
        tri = ad.take(p["vertices"], fidx.ravel()).reshape(len(bound), 3, 3)
        c, R, nf = triangle_frames(tri, ref_edges[bound])
        parts_mu.append((c, bound))
        parts_rot.append((R, bound))
        parts_n.append((nf, bound))
    if len(free):
        q = g.q_shape[free] / np.linalg.norm(g.q_shape[free], axis=1, keepdims=True)
        R = quat_to_matrix(q)
        parts_mu.append((g.mu[free], free))
        parts_rot.append((R, free))
        parts_n.append((R[:, :, 2], free))

    def assemble(parts, tail):
        if len(parts) == 1 and np.array_equal(parts[0][1], np.arange(N)):
            return parts[0][0]
        out = np.zeros((N,) + tail)
        for arr, idx in parts:
            out = out + ad.scatter_rows(arr, idx, N)
        return out

    mu = assemble(parts_mu, (3,)) if N else np.zeros((0, 3))
    rot = assemble(parts_rot, (3, 3)) if N else np.zeros((0, 3, 3))
    nf = assemble(parts_n, (3,)) if N else np.zeros((0, 3))
    act = activate_params(p["raw_alpha"], p["raw_scale"], p["raw_albedo"], p["raw_rough"],
                          p["raw_metal"], g.q_shape, p["q_normal"])
    normal = rotated_normal(nf, p["q_normal"]) if N else np.zeros((0, 3))
    return Geometry(mu=mu, rot=rot, scale=act.scale, normal=normal, alpha=act.alpha,
                    albedo=act.albedo, roughness=act.roughness, metalness=act.metalness,
                    sh_rgb=p["sh_rgb"], sh_aux=p["sh_aux"], face_normal=nf)


# -- projection ------------------------------------------------------------------

@dataclass
class Splat2D:
    center: np.ndarray
    cov2d: np.ndarray
    depth: float
    index: int


@dataclass
class Projection:
    mean2: object    # (N, 2)
    conic: object    # (N, 3): a, b, c of the inverse covariance
    depth: object    # (N,)
    cov: np.ndarray  # (N, 2, 2) values, dilated
    radius: np.ndarray
    visible: np.ndarray


def project(geom: Geometry, cam: Camera) -> Projection:
    """EWA projection of all Gaussians (arrays or Var)."""
    Rc = cam.R
    pc = geom.mu @ Rc.T + cam.t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    zv = ad.value(z)
    safe = np.where(zv > 1e-9, 0.0, 1.0)  # keeps culled entries finite
    z = z + safe
    iz = 1.0 / z
    mean2 = np.stack([cam.fx * x * iz + cam.cx, cam.fy * y * iz + cam.cy], axis=1)
    row0 = (cam.fx * iz)[:, None] * Rc[0] - (cam.fx * x * iz * iz)[:, None] * Rc[2]
    row1 = (cam.fy * iz)[:, None] * Rc[1] - (cam.fy * y * iz * iz)[:, None] * Rc[2]
    JW = np.stack([row0, row1], axis=1)                 # (N, 2, 3)
    M = (JW @ geom.rot) * geom.scale[:, None, :]
    cov = M @ M.swapaxes(1, 2)
    a = cov[:, 0, 0] + COV_DILATION
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + COV_DILATION
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    av, bv, cv = ad.value(a), ad.value(b), ad.value(c)
    mid = 0.5 * (av + cv)
    lam = mid + np.sqrt(np.maximum(mid * mid - (av * cv - bv * bv), 0.0))
    radius = np.ceil(3.0 * np.sqrt(lam))
    m2 = ad.value(mean2)
    in_view = ((m2[:, 0] + radius >= 0) & (m2[:, 0] - radius <= cam.width - 1)
               & (m2[:, 1] + radius >= 0) & (m2[:, 1] - radius <= cam.height - 1))
    visible = (zv > cam.near) & (zv < cam.far) & in_view
    covv = np.stack([np.stack([av, bv], -1), np.stack([bv, cv], -1)], -2)
    return Projection(mean2, conic, pc[:, 2], covv, radius, visible)


def project_gaussian(g: Gaussian3D, cam: Camera):
    """Project one splat; returns ``Splat2D`` or ``None`` when culled."""
    geom = Geometry(mu=np.asarray(g.mu, dtype=np.float64)[None],
                    rot=quat_to_matrix(np.asarray(g.q_shape, dtype=np.float64)[None]),
                    scale=np.asarray(g.s, dtype=np.float64)[None], normal=None, alpha=None,
                    albedo=None, roughness=None, metalness=None, sh_rgb=None, sh_aux=None)
    pr = project(geom, cam)
    if not pr.visible[0]:
        return None
    return Splat2D(center=pr.mean2[0].copy(), cov2d=pr.cov[0].copy(), depth=float(pr.depth[0]), index=0)


# -- fragment plan ---------------------------------------------------------------------

@dataclass
class RenderPlan:
    """Frozen fragment structure for one camera (plain arrays only)."""

    height: int
    width: int
    frag_g: np.ndarray     # Gaussian of each fragment
    frag_pix: np.ndarray   # flat pixel index
    frag_p: np.ndarray     # index into active_pix
    frag_k: np.ndarray     # rank within the pixel (front to back)
    active_pix: np.ndarray
    K: int
    fg_pix: np.ndarray | None = None      # foreground pixels shaded by the deferred pass
    frozen: dict = field(default_factory=dict)  # detached quantities (visibility, pseudo-normals)

    @property
    def n_frag(self):
        return len(self.frag_g)


def build_plan(proj: Projection, alpha, cam: Camera) -> RenderPlan:
    """Enumerate, cull, sort and truncate fragments from plain values."""
    H, W = cam.height, cam.width
    m2 = ad.value(proj.mean2)
    conic = ad.value(proj.conic)
    depth = ad.value(proj.depth)
    op = ad.value(alpha)
    ids = np.flatnonzero(proj.visible)
    r = proj.radius[ids]
    x0 = np.clip(np.floor(m2[ids, 0] - r), 0, W - 1).astype(np.int64)
    x1 = np.clip(np.ceil(m2[ids, 0] + r), 0, W - 1).astype(np.int64)
    y0 = np.clip(np.floor(m2[ids, 1] - r), 0, H - 1).astype(np.int64)
    y1 = np.clip(np.ceil(m2[ids, 1] + r), 0, H - 1).astype(np.int64)
    bw = x1 - x0 + 1
    cnt = bw * (y1 - y0 + 1)
    total = int(cnt.sum())
    gid = np.repeat(ids, cnt)
    local = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    bwr = np.repeat(bw, cnt)
    px = np.repeat(x0, cnt) + local % bwr
    py = np.repeat(y0, cnt) + local // bwr
    dx = px - m2[gid, 0]
    dy = py - m2[gid, 1]
    power = -0.5 * (conic[gid, 0] * dx * dx + conic[gid, 2] * dy * dy) - conic[gid, 1] * dx * dy
    a = np.minimum(ALPHA_MAX, op[gid] * np.exp(np.minimum(power, 0.0)))
    keep = (power <= 0.0) & (a >= ALPHA_MIN)
    gid, px, py, a = gid[keep], px[keep], py[keep], a[keep]
    pix = py * W + px
    order = np.lexsort((gid, depth[gid], pix))
    gid, pix, a = gid[order], pix[order], a[order]

    # rank within pixel and transmittance before each fragment
    if len(pix):
        new = np.r_[True, pix[1:] != pix[:-1]]
        starts = np.flatnonzero(new)
        seg = np.cumsum(new) - 1
        rank = np.arange(len(pix)) - starts[seg]
        logt = np.log1p(-a)
        cum = np.cumsum(logt)
        before = cum - logt - (cum - logt)[starts][seg]
        keep = np.exp(before) >= T_STOP
        gid, pix, rank = gid[keep], pix[keep], rank[keep]
    else:
        rank = np.zeros(0, dtype=np.int64)
    active, frag_p = np.unique(pix, return_inverse=True)
    K = int(rank.max()) + 1 if len(rank) else 0
    return RenderPlan(H, W, gid, pix, frag_p.astype(np.int64), rank.astype(np.int64),
                      active, K)


# -- blending -------------------------------------------------------------------------

@dataclass
class GBuffer:
    """Per-pixel blended maps. Fields may hold ``autodiff.Var``."""

    depth: object      # (H, W)
    normal: object     # (H, W, 3)
    albedo: object     # (H, W, 3)
    roughness: object  # (H, W)
    metalness: object  # (H, W)
    opacity: object    # (H, W)
    aux_sh: object     # (H, W, 27)
    radiance: object   # (H, W, 3)
    normalized: bool = False
    rows: object = None  # (P, N_CH) blended channels of the active pixels

    def values(self) -> "GBuffer":
        return GBuffer(*(ad.value(getattr(self, k)) for k in
                         ("depth", "normal", "albedo", "roughness", "metalness", "opacity",
                          "aux_sh", "radiance")), normalized=self.normalized,
                       rows=None if self.rows is None else ad.value(self.rows))


def radiance_colors(geom: Geometry, cam: Camera):
    """View-dependent colour of each Gaussian from its radiance SH."""
    d = geom.mu - cam.center
    d = d / ad.norm(d, keepdims=True)
    Y = shlib.basis(d, 3)                              # (N, 16)
    col = (Y[:, :, None] * geom.sh_rgb).sum(axis=1) + 0.5
    return np.maximum(col, 0.0)


def gaussian_features(geom: Geometry, proj: Projection, cam: Camera):
    N = len(ad.value(geom.alpha))
    ones = np.ones((N, 1))
    return np.concatenate([
        ones, proj.depth[:, None], geom.normal, geom.albedo, geom.roughness[:, None],
        geom.metalness[:, None], radiance_colors(geom, cam), geom.sh_aux.reshape(N, 27),
    ], axis=1)


def fragment_alpha(proj: Projection, alpha, plan: RenderPlan):
    W = plan.width
    px = (plan.frag_pix % W).astype(np.float64)
    py = (plan.frag_pix // W).astype(np.float64)
    m = ad.take(proj.mean2, plan.frag_g)
    cn = ad.take(proj.conic, plan.frag_g)
    dx = px - m[:, 0]
    dy = py - m[:, 1]
    power = -0.5 * (cn[:, 0] * dx * dx + cn[:, 2] * dy * dy) - cn[:, 1] * dx * dy
    return np.minimum(ALPHA_MAX, ad.take(alpha, plan.frag_g) * np.exp(power))


def blend_weights(frag_a, plan: RenderPlan):
    """Blending weights T_i * alpha_i per fragment (front-to-back)."""
    P, K = len(plan.active_pix), plan.K
    slot = plan.frag_p * K + plan.frag_k
    dense = ad.scatter_rows(frag_a, slot, P * K).reshape(P, K)
    T = ad.exclusive_transmittance(dense)
    w = (T * dense).reshape(P * K)
    return ad.take(w, slot)


def blend(feats, frag_w, plan: RenderPlan):
    """(P, C) weighted sums of per-Gaussian features over each pixel's fragments."""
    f = ad.take(feats, plan.frag_g)
    return ad.segment_sum(f * frag_w[:, None], plan.frag_p, len(plan.active_pix))


def rows_to_gbuffer(rows, plan: RenderPlan, normalized: bool = False) -> GBuffer:
    H, W = plan.height, plan.width
    if normalized:
        o = rows[:, CH_O:CH_O + 1]
        ov = ad.value(o)
        inv = 1.0 / np.where(ov > 0, o, 1.0)
        rows = np.concatenate([o, rows[:, 1:] * inv], axis=1)
    full = ad.scatter_rows(rows, plan.active_pix, H * W)
    img = full.reshape(H, W, N_CH)
    return GBuffer(depth=img[:, :, CH_D], normal=img[:, :, CH_N], albedo=img[:, :, CH_A],
                   roughness=img[:, :, CH_R], metalness=img[:, :, CH_M], opacity=img[:, :, CH_O],
                   aux_sh=img[:, :, CH_AUX], radiance=img[:, :, CH_RAD], normalized=normalized,
                   rows=rows)


def rasterize_gbuffer(scene: HybridScene, cam: Camera, params=None, plan: RenderPlan | None = None,
                      normalized: bool = False):
    """G-buffer for ``cam``; returns ``(gbuffer, plan, geom, proj)``."""
    geom = gaussian_geometry(scene, params)
    proj = project(geom, cam)
    if plan is None:
        plan = build_plan(proj, geom.alpha, cam)
    if plan.n_frag == 0:
        H, W = cam.height, cam.width
        z = np.zeros
        gb = GBuffer(z((H, W)), z((H, W, 3)), z((H, W, 3)), z((H, W)), z((H, W)), z((H, W)),
                     z((H, W, 27)), z((H, W, 3)), normalized, rows=z((0, N_CH)))
        return gb, plan, geom, proj
    fa = fragment_alpha(proj, geom.alpha, plan)
    w = blend_weights(fa, plan)
    rows = blend(gaussian_features(geom, proj, cam), w, plan)
    return rows_to_gbuffer(rows, plan, normalized), plan, geom, proj


# -- shading passes ---------------------------------------------------------------------

def pixel_rays(cam: Camera, pix):
    """Unnormalised world rays (camera z = 1) through flat pixel indices."""
    px = (pix % cam.width).astype(np.float64)
    py = (pix // cam.width).astype(np.float64)
    return cam.pixel_rays(px, py)


def background(scene: HybridScene, cam: Camera):
    H, W = cam.height, cam.width
    if scene.light.envmap is None:
        return np.zeros((H, W, 3))
    d = pixel_rays(cam, np.arange(H * W))
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    return scene.light.lookup(d).reshape(H, W, 3)


def make_visibility(scene: HybridScene, bvh=None):
    from .visibility import build_bvh, scene_t_max

    if len(scene.mesh.faces) == 0:
        return None
    if bvh is None:
        bvh = build_bvh(scene.mesh)
    return TracedVisibility(bvh, scene_t_max(scene.mesh))


CHUNK_SAMPLES = 1 << 19


def shade_chunked(sp: ShadingPoint, light, spp, strategy, vis, mode, seed, frame, pixel_ids,
                  use_envmap=None, sh_global=None, vis_values=None, printed_forms=False,
                  brdf=None):
    """``shade`` over blocks of points so plain-array renders at high spp fit in memory.

    Differentiable inputs are shaded in one call to keep a single graph.
    """
    P = len(sp)
    fields_ = (sp.x, sp.n, sp.albedo, sp.roughness, sp.metalness, sp.wo, sp.aux_sh)
    has_var = any(isinstance(f, ad.Var) for f in fields_) or isinstance(sh_global, ad.Var)
    step = max(1, CHUNK_SAMPLES // spp)
    if has_var or P <= step:
        return shade(sp, light, spp, strategy, vis, mode, seed, frame, pixel_ids,
                     use_envmap=use_envmap, sh_global=sh_global, vis_values=vis_values,
                     printed_forms=printed_forms, brdf=brdf)
    rgbs, Vs = [], []
    for a in range(0, P, step):
        sl = slice(a, a + step)
        part = ShadingPoint(*(f[sl] for f in fields_))
        rgb, V = shade(part, light, spp, strategy, vis, mode, seed, frame, pixel_ids[sl],
                       use_envmap=use_envmap, sh_global=sh_global,
                       vis_values=None if vis_values is None else vis_values[sl],
                       printed_forms=printed_forms, brdf=brdf)
        rgbs.append(rgb)
        Vs.append(V)
    return np.concatenate(rgbs), np.concatenate(Vs)


@dataclass
class RenderResult:
    image: object          # (H, W, 3) linear PBR image
    gbuffer: GBuffer
    plan: RenderPlan
    fg: np.ndarray         # (H, W) bool foreground mask


GRAZING_COS = 0.05


def face_viewer(n, wo, eps: float = GRAZING_COS):
    """Bend unit normals with ``n . wo < eps`` towards the viewer until ``n . wo = eps``.

    Blended normals at silhouettes can tip past perpendicular, which would
    shade the pixel black; the bend keeps the response continuous there.
    """
    c = (n * wo).sum(axis=-1, keepdims=True)
    b = n + np.maximum(eps - c, 0.0) * wo
    return b / ad.norm(b, keepdims=True)


def render_deferred(scene: HybridScene, cam: Camera, spp: int, mode: str = "train",
                    strategy: str | None = None, seed: int = 0, frame: int = 0, params=None,
                    plan: RenderPlan | None = None, vis=None, bvh=None, normalized: bool = False,
                    sh_global=None, use_envmap: bool | None = None, tau_fg: float = TAU_FG,
                    printed_forms: bool = False, brdf=None) -> RenderResult:
    """Blend the G-buffer, then shade once per foreground pixel.

    Foreground pixels (opacity > ``tau_fg``) are shaded at depth D along the
    pixel ray; others show the environment in the view direction (black
    without a map). With a frozen ``plan`` the foreground set and the traced
    visibility are reused.
    """
    if spp < 1:
        raise ValueError("spp must be >= 1")
    if strategy is None:
        strategy = "mis" if scene.light.envmap is not None and use_envmap is not False else "fibonacci"
    gb, plan, geom, proj = rasterize_gbuffer(scene, cam, params, plan, normalized)
    rows = gb.rows
    rv = ad.value(rows)
    if not np.all(np.isfinite(rv)):
        bad = plan.active_pix[np.flatnonzero(~np.isfinite(rv).all(axis=1))[0]]
        raise FloatingPointError(f"non-finite G-buffer at pixel (row {bad // cam.width}, col {bad % cam.width})")
    if plan.fg_pix is None:
        sel = np.flatnonzero(rv[:, CH_O] > tau_fg) if len(rv) else np.zeros(0, dtype=np.int64)
        plan.fg_pix = sel
    sel = plan.fg_pix
    H, W = cam.height, cam.width
    bg = background(scene, cam)
    fg_mask = np.zeros(H * W, dtype=bool)
    fg_mask[plan.active_pix[sel]] = True
    if len(sel) == 0:
        return RenderResult(bg, gb, plan, fg_mask.reshape(H, W))
    pix = plan.active_pix[sel]
    r = ad.take(rows, sel)
    ray = pixel_rays(cam, pix)
    depth = ad.value(r[:, CH_D])
    N = r[:, CH_N]
    nlen = ad.norm(N, keepdims=True)
    n = N / np.maximum(nlen, 1e-12)
    if mode == "train" and vis is None and "deferred" not in plan.frozen:
        vis = make_visibility(scene, bvh)
    if isinstance(vis, TracedVisibility):
        from .visibility import first_hit

        # blended depth leaks past the first surface where coverage is thin;
        # a point behind the mesh would shadow itself, so stop at the first hit
        depth = np.minimum(depth, first_hit(vis.bvh, cam.center, ray))
    x = cam.center + depth[:, None] * ray
    wo = -ray / np.linalg.norm(ray, axis=1, keepdims=True)
    n = face_viewer(n, wo)
    aux = r[:, CH_AUX]
    if mode == "baked" and not normalized:
        # baked visibility is a fraction, so average it rather than premultiply
        aux = aux / np.maximum(ad.value(r[:, CH_O:CH_O + 1]), 1e-12)
    sp = ShadingPoint(x=x, n=n, albedo=r[:, CH_A], roughness=r[:, CH_R], metalness=r[:, CH_M],
                      wo=wo, aux_sh=aux.reshape(len(pix), 9, 3))
    rgb, V = shade_chunked(sp, scene.light, spp, strategy, vis, mode, seed, frame, pix,
                           use_envmap=use_envmap, sh_global=sh_global,
                           vis_values=plan.frozen.get("deferred"), printed_forms=printed_forms,
                           brdf=brdf)
    if mode == "train":
        plan.frozen["deferred"] = V
    bg_flat = bg.reshape(H * W, 3)
    keep_bg = np.where(fg_mask[:, None], 0.0, bg_flat)
    img = ad.scatter_rows(rgb, pix, H * W) + keep_bg
    return RenderResult(img.reshape(H, W, 3), gb, plan, fg_mask.reshape(H, W))


def render_forward(scene: HybridScene, cam: Camera, spp: int, strategy: str | None = None,
                   seed: int = 0, frame: int = 0, vis=None, bvh=None, mode: str = "train",
                   normalized: bool = False, tau_fg: float = TAU_FG) -> RenderResult:
    """Shade every fragment at its own depth point, then alpha-blend colours."""
    if spp < 1:
        raise ValueError("spp must be >= 1")
    if strategy is None:
        strategy = "mis" if scene.light.envmap is not None else "fibonacci"
    geom = gaussian_geometry(scene)
    proj = project(geom, cam)
    plan = build_plan(proj, geom.alpha, cam)
    gb, plan, _, _ = rasterize_gbuffer(scene, cam, plan=plan, normalized=normalized)
    H, W = cam.height, cam.width
    bg = background(scene, cam)
    if plan.n_frag == 0:
        return RenderResult(bg, gb, plan, np.zeros((H, W), dtype=bool))
    fa = fragment_alpha(proj, geom.alpha, plan)
    w = blend_weights(fa, plan)
    gi = plan.frag_g
    ray = pixel_rays(cam, plan.frag_pix)
    x = cam.center + proj.depth[gi][:, None] * ray
    wo = -ray / np.linalg.norm(ray, axis=1, keepdims=True)
    sp = ShadingPoint(x=x, n=geom.normal[gi], albedo=geom.albedo[gi], roughness=geom.roughness[gi],
                      metalness=geom.metalness[gi], wo=wo, aux_sh=geom.sh_aux[gi])
    if mode == "train" and vis is None:
        vis = make_visibility(scene, bvh)
    ids = plan.frag_pix + (H * W) * (plan.frag_k + 1)
    c, _ = shade_chunked(sp, scene.light, spp, strategy, vis, mode, seed, frame, ids)
    rows = ad.segment_sum(c * w[:, None], plan.frag_p, len(plan.active_pix))
    o = ad.value(gb.rows)[:, CH_O]
    if normalized:
        rows = rows / np.where(o > 0, o, 1.0)[:, None]
    fg = o > tau_fg
    img = bg.reshape(H * W, 3).copy()
    img[plan.active_pix[fg]] = rows[fg]
    fg_mask = np.zeros(H * W, dtype=bool)
    fg_mask[plan.active_pix[fg]] = True
    return RenderResult(img.reshape(H, W, 3), gb, plan, fg_mask.reshape(H, W))
