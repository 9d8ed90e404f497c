"""Small synthetic scenes used by the CLI, the gradient check and the tests."""

from __future__ import annotations

import numpy as np

from .hybrid_mesh import bind_gaussians, icosphere
from .scene_model import Camera, EnvironmentLight, HybridScene, TrainView, logit
from .sampling import fibonacci_sphere
from .splat_raster import render_deferred
from .visibility import build_bvh

# piecewise albedo of the round-trip sphere, keyed by region
ROUNDTRIP_ALBEDO = np.array([[0.75, 0.35, 0.2], [0.2, 0.55, 0.7], [0.6, 0.6, 0.25]])
ROUNDTRIP_ROUGHNESS = 0.6


def tiny_scene(seed: int = 1, size: int = 16):
    """A 20-Gaussian icosahedron with randomised parameters and a random target.

    Scales are jittered so no two in-plane axes tie, which keeps the scale
    hinge differentiable at the test point.
    """
    rng = np.random.default_rng(seed)
    sc = bind_gaussians(icosphere(0), kappa_init=0.6)
    g = sc.gaussians
    n = len(g)
    g.raw_scale[:, :2] += rng.normal(0, 0.1, (n, 2))
    g.raw_alpha[:] = rng.uniform(0.5, 2.0, n)
    g.raw_albedo[:] = rng.normal(0, 0.5, (n, 3))
    g.raw_rough[:] = rng.normal(0, 0.5, n)
    g.raw_metal[:] = rng.normal(-1, 0.5, n)
    g.q_normal[:] = np.c_[np.ones(n), rng.normal(0, 0.1, (n, 3))]
    g.sh_rgb[:] = rng.normal(0, 0.1, g.sh_rgb.shape)
    g.sh_aux[:] = rng.normal(0, 0.1, g.sh_aux.shape)
    g.sh_aux[:, 0, :] += 0.3
    sc.mesh.vertices += rng.normal(0, 0.02, sc.mesh.vertices.shape)
    sh = rng.normal(0, 0.2, (9, 3))
    sh[0] = 3.0
    sc.light = EnvironmentLight(sh)
    cam = Camera.look_at([0.3, -3.0, 0.8], [0, 0, 0], fov_deg=50, width=size, height=size)
    from .splat_raster import rasterize_gbuffer

    gb, *_ = rasterize_gbuffer(sc, cam)
    img = rng.uniform(0.05, 0.9, (size, size, 3))
    view = TrainView(img, (gb.opacity > 0.3).astype(float), cam)
    return sc, view


def orbit_cameras(n: int, radius: float = 4.5, size: int = 64, fov_deg: float = 45.0,
                  offset: float = 0.0):
    """Cameras on a Fibonacci sphere looking at the origin.

    ``offset`` rotates the set about z so held-out views differ from training ones.
    """
    pts = fibonacci_sphere(n)
    c, s = np.cos(offset), np.sin(offset)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return [Camera.look_at(radius * (rot @ p), [0, 0, 0], fov_deg=fov_deg, width=size, height=size)
            for p in pts]


def default_sh_light() -> EnvironmentLight:
    """A warm key light from +z+x over a dim ambient term (degree 2)."""
    sh = np.zeros((9, 3))
    sh[0] = [2.2, 2.1, 2.0]
    sh[1] = [0.3, 0.3, 0.35]      # y
    sh[2] = [0.9, 0.85, 0.7]     # z
    sh[3] = [0.6, 0.55, 0.45]    # x
    sh[6] = [0.15, 0.12, 0.1]
    sh[8] = [0.1, 0.1, 0.12]
    return EnvironmentLight(sh)


def roundtrip_scene(level: int = 4, light: EnvironmentLight | None = None) -> HybridScene:
    """Icosphere with three albedo regions, m = 0, r = 0.6 and no local light."""
    sc = bind_gaussians(icosphere(level), light=light or default_sh_light())
    g = sc.gaussians
    c = g.mu
    region = np.where(c[:, 2] > 0.35, 0, np.where(np.arctan2(c[:, 1], c[:, 0]) > 0, 1, 2))
    g.raw_albedo[:] = logit(ROUNDTRIP_ALBEDO[region])
    g.raw_rough[:] = logit(ROUNDTRIP_ROUGHNESS)
    g.raw_metal[:] = -30.0
    g.sh_aux[:] = 0.0
    return fit_radiance_sh(sc)


def fit_radiance_sh(scene: HybridScene, n_dirs: int = 64, spp: int = 64, ridge: float = 1e-3):
    """Fit each Gaussian's radiance SH to its own shaded, display-mapped colour.

    Stands in for a finished Stage 2 on synthetic scenes: the radiance branch
    then agrees with the physically based render seen from outside. Only view
    directions in front of the Gaussian enter the (ridge-regularised) fit;
    visibility is not traced, so it suits convex scenes.
    """
    from . import sh as shlib
    from .lighting import NoOcclusion, ShadingPoint, shade
    from .postproc import tonemap_srgb
    from .splat_raster import gaussian_geometry

    geom = gaussian_geometry(scene)
    n = geom.normal
    N = len(n)
    views = fibonacci_sphere(n_dirs)                    # unit vectors towards the viewer
    Y = shlib.basis(-views, 3)                          # radiance SH is keyed by mu - eye
    front = n @ views.T > 0.05                          # (N, D)
    gi, di = np.nonzero(front)
    sp = ShadingPoint(x=geom.mu[gi], n=n[gi], albedo=geom.albedo[gi], roughness=geom.roughness[gi],
                      metalness=geom.metalness[gi], wo=views[di], aux_sh=geom.sh_aux[gi])
    rgb, _ = shade(sp, scene.light, spp, "fibonacci", NoOcclusion(), pixel_ids=np.arange(len(gi)))
    target = tonemap_srgb(rgb) - 0.5
    A = np.zeros((N, 16, 16))
    b = np.zeros((N, 16, 3))
    np.add.at(A, gi, Y[di][:, :, None] * Y[di][:, None, :])
    np.add.at(b, gi, Y[di][:, :, None] * target[:, None, :])
    A += ridge * np.eye(16)
    scene.gaussians.sh_rgb[:] = np.linalg.solve(A, b)
    return scene


def render_views(scene: HybridScene, cams, spp: int = 64, seed: int = 0, strategy="fibonacci",
                 use_envmap=False):
    """Ground-truth training views rendered with traced visibility."""
    bvh = build_bvh(scene.mesh)
    views = []
    for i, cam in enumerate(cams):
        res = render_deferred(scene, cam, spp, "train", strategy, seed, frame=10_000 + i, bvh=bvh,
                              use_envmap=use_envmap)
        views.append(TrainView(res.image, res.fg.astype(np.float64), cam))
    return views


def reset_brdf(scene: HybridScene) -> HybridScene:
    """Copy with albedo, roughness and metalness raws set to zero."""
    out = scene.copy()
    g = out.gaussians
    g.raw_albedo[:] = 0.0
    g.raw_rough[:] = 0.0
    g.raw_metal[:] = 0.0
    return out


def albedo_maps(scene: HybridScene, cams):
    """Opacity-normalised albedo G-buffers and foreground masks per camera."""
    from .splat_raster import TAU_FG, rasterize_gbuffer

    out = []
    for cam in cams:
        gb, *_ = rasterize_gbuffer(scene, cam)
        gb = gb.values()
        o = gb.opacity
        alb = gb.albedo / np.where(o > 0, o, 1.0)[..., None]
        out.append((alb, o > TAU_FG))
    return out


def rescaled_albedo_mae(pred: HybridScene, gt: HybridScene, cams):
    """Mean absolute albedo error after the per-channel median rescale.

    Pixels count when they are foreground in both renders.
    """
    from .postproc import basecolor_rescale

    P = albedo_maps(pred, cams)
    G = albedo_maps(gt, cams)
    pa = np.concatenate([p[0][p[1] & g[1]] for p, g in zip(P, G)])
    ga = np.concatenate([g[0][p[1] & g[1]] for p, g in zip(P, G)])
    k = basecolor_rescale(pa, ga, np.ones(len(pa), dtype=bool))
    return float(np.mean(np.abs(pa * k - ga))), k


def rescale_albedo(scene: HybridScene, k) -> HybridScene:
    """Copy with every Gaussian's albedo multiplied by ``k`` (clamped to [0, 1])."""
    from .scene_model import sigmoid

    out = scene.copy()
    a = np.clip(sigmoid(out.gaussians.raw_albedo) * np.asarray(k), 1e-6, 1 - 1e-6)
    out.gaussians.raw_albedo = logit(a)
    return out


# -- hidden-splat rig ----------------------------------------------------------------

HIDDEN = dict(depth=0.12, x=(0.93, 0.95, 0.97), y=(-0.06, -0.03, 0.0, 0.03, 0.06), alpha=0.4,
              sigma=0.008, albedo=0.8)
PLATE_BRDF = dict(albedo=0.5, roughness=1.0, metalness=0.0)
SUN_ELEVATION = np.radians(30.0)


def sun_direction():
    return np.array([np.cos(SUN_ELEVATION), 0.0, np.sin(SUN_ELEVATION)])


def sky_envmap(height: int = 32, width: int = 64, sun_radiance: float = 2.0e5, sky=(0.3, 0.5),
               ground: float = 0.05):
    """Smooth sky over a dim ground plus a single very bright sun texel."""
    from .sampling import dir_to_uv, uv_to_dir

    v, u = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width,
                       indexing="ij")
    d = uv_to_dir(u, v)
    up = d[..., 2]
    env = np.where(up > 0, sky[0] + sky[1] * up, ground)[..., None] * np.array([0.9, 0.95, 1.0])
    su, sv = dir_to_uv(sun_direction())
    env[min(int(sv * height), height - 1), min(int(su * width), width - 1)] = sun_radiance
    return env


def hidden_splats(n_plate_faces: int = 0):
    """Unbound, upward-facing splats sitting under the plate near its lit edge."""
    from .scene_model import Gaussians

    hx, hy = np.meshgrid(HIDDEN["x"], HIDDEN["y"], indexing="ij")
    n = hx.size
    g = Gaussians.empty(n)
    g.mu = np.stack([hx.ravel(), hy.ravel(), np.full(n, -HIDDEN["depth"])], axis=1)
    g.mu_init = g.mu.copy()
    g.raw_scale[:] = np.log([HIDDEN["sigma"], HIDDEN["sigma"], 1e-4 * HIDDEN["sigma"]])
    g.raw_alpha[:] = logit(HIDDEN["alpha"])
    g.raw_albedo[:] = logit(HIDDEN["albedo"])
    g.raw_rough[:] = logit(1.0 - 1e-6)
    g.raw_metal[:] = -30.0
    return g


def hidden_rig(plate_alpha: float = 0.9, with_hidden: bool = True, plate_n: int = 40):
    """The two-plates scene lit by the sky map, optionally with hidden splats.

    Returns ``(scene, camera)``. The wall is bound like the plate but its
    Gaussians are nearly edge-on to the camera.
    """
    from .hybrid_mesh import two_plates

    mesh = two_plates(plate_n=plate_n)
    sc = bind_gaussians(mesh, alpha_init=plate_alpha,
                        light=EnvironmentLight(np.zeros((9, 3)), sky_envmap()))
    g = sc.gaussians
    g.raw_albedo[:] = logit(PLATE_BRDF["albedo"])
    g.raw_rough[:] = logit(PLATE_BRDF["roughness"] - 1e-6)
    g.raw_metal[:] = -30.0
    if with_hidden:
        sc.gaussians = g.concat(hidden_splats())
    cam = Camera.look_at([0.8, 0.0, 2.5], [0.8, 0.0, 0.0], up=(1.0, 0.0, 0.0), fov_deg=16.0,
                         width=40, height=40)
    return sc, cam


def plate_hits(cam: Camera, pix):
    """Exact intersection of pixel rays with the plate plane z = 0."""
    from .splat_raster import pixel_rays

    ray = pixel_rays(cam, np.asarray(pix))
    t = -cam.center[2] / ray[:, 2]
    return cam.center + t[:, None] * ray


def _texel_cells(envmap, sub):
    from .sampling import uv_to_dir

    H, W = envmap.shape[:2]
    fu = (np.arange(W * sub) + 0.5) / (W * sub)
    fv = (np.arange(H * sub) + 0.5) / (H * sub)
    v, u = np.meshgrid(fv, fu, indexing="ij")
    d = uv_to_dir(u, v).reshape(-1, 3)
    edges = np.linspace(0.0, np.pi, H * sub + 1)
    omega = np.repeat((np.cos(edges[:-1]) - np.cos(edges[1:])) * (2 * np.pi / (W * sub)), W * sub)
    L = np.repeat(np.repeat(np.asarray(envmap, dtype=np.float64), sub, axis=0), sub, axis=1)
    return d, omega, L.reshape(-1, 3)


def sun_shadowed(points, envmap, wall_tris, sub: int = 4):
    """True where every cell of the brightest texel is blocked by the wall."""
    from .visibility import brute_force_occlusion

    d, _, L = _texel_cells(envmap, sub)
    sun = d[L.sum(1) >= L.sum(1).max() * (1 - 1e-6)]
    n = np.array([0.0, 0.0, 1.0])
    occ = brute_force_occlusion(wall_tris, np.asarray(points)[:, None, :] + 1e-3 * n, sun[None], 1e3)
    return occ.all(axis=1)


def analytic_plate(points, wo, envmap, wall_tris, sub: int = 4):
    """Reflected radiance of the plate at ``points`` by texel quadrature.

    Every texel is split into ``sub`` x ``sub`` cells; a cell contributes its
    texel radiance times BRDF, cosine, solid angle and visibility. The plate
    is planar and only its upper hemisphere matters, so the wall is the only
    possible occluder; it is tested by brute force.
    """
    from .brdf import eval_brdf
    from .visibility import brute_force_occlusion

    d, omega, L = _texel_cells(envmap, sub)
    up = d[:, 2] > 0
    d, omega, L = d[up], omega[up], L[up]
    cos = d[:, 2]
    n = np.array([0.0, 0.0, 1.0])
    out = np.zeros((len(points), 3))
    for i, (p, w) in enumerate(zip(points, wo)):
        occ = brute_force_occlusion(wall_tris, p[None, :] + 1e-3 * n, d, 1e3, chunk=4096)
        f = eval_brdf(np.full((len(d), 3), PLATE_BRDF["albedo"]), np.full(len(d), PLATE_BRDF["roughness"]),
                      np.zeros(len(d)), np.broadcast_to(n, d.shape), d, np.broadcast_to(w, d.shape))
        out[i] = ((f * L) * (cos * omega * (~occ))[:, None]).sum(axis=0)
    return out



def demo_hidden(spp: int = 4096, forward_spp: int = 64, seed: int = 0, weight_min: float = 0.5):
    """Forward vs deferred vs analytic shading of the shadowed plate.

    Affected pixels hold a hidden-splat fragment whose Gaussian falloff is at
    least ``weight_min`` and see a plate point that the wall fully shadows
    from the sun. Returns a dict with the images, the affected mask and the
    per-channel means and relative deviations.
    """
    from .hybrid_mesh import two_plates
    from .splat_raster import build_plan, gaussian_geometry, project, render_deferred, render_forward

    sc, cam = hidden_rig()
    geom = gaussian_geometry(sc)
    proj = project(geom, cam)
    plan = build_plan(proj, geom.alpha, cam)
    nb = int((sc.gaussians.tri_id >= 0).sum())
    g = plan.frag_g
    px = plan.frag_pix
    m2 = np.asarray(proj.mean2)[g]
    con = np.asarray(proj.conic)[g]
    dx = px % cam.width - m2[:, 0]
    dy = px // cam.width - m2[:, 1]
    power = -0.5 * (con[:, 0] * dx * dx + con[:, 2] * dy * dy) - con[:, 1] * dx * dy
    pix = np.unique(px[(g >= nb) & (np.exp(power) >= weight_min)])
    pts = plate_hits(cam, pix)
    wall = two_plates(plate_n=40).triangles[-2:]
    ok = sun_shadowed(pts, sc.light.envmap, wall)
    pix, pts = pix[ok], pts[ok]
    if len(pix) == 0:
        raise RuntimeError("hidden rig produced no affected pixels")
    wo = cam.center - pts
    wo /= np.linalg.norm(wo, axis=1, keepdims=True)
    ana = analytic_plate(pts, wo, sc.light.envmap, wall)
    rd = render_deferred(sc, cam, spp, strategy="mis", seed=seed)
    rf = render_forward(sc, cam, forward_spp, strategy="mis", seed=seed)
    d = rd.image.reshape(-1, 3)[pix]
    f = rf.image.reshape(-1, 3)[pix]
    ref = ana.mean(axis=0)
    mask = np.zeros(cam.height * cam.width, dtype=bool)
    mask[pix] = True
    return {
        "deferred": rd.image, "forward": rf.image, "mask": mask.reshape(cam.height, cam.width),
        "affected_pixels": int(len(pix)),
        "analytic_mean": ref, "deferred_mean": d.mean(axis=0), "forward_mean": f.mean(axis=0),
        "deferred_rel_dev": np.abs(d.mean(axis=0) / ref - 1.0),
        "forward_rel_dev": np.abs(f.mean(axis=0) / ref - 1.0),
    }


def hidden_report(res) -> str:
    """Key-value divergence report for ``demo_hidden`` output."""
    from .io import format_kv

    fmt = lambda v: " ".join(f"{x:.6g}" for x in np.ravel(v))
    return format_kv({
        "affected_pixels": res["affected_pixels"],
        "analytic_mean": fmt(res["analytic_mean"]),
        "deferred_mean": fmt(res["deferred_mean"]),
        "forward_mean": fmt(res["forward_mean"]),
        "deferred_rel_dev": fmt(res["deferred_rel_dev"]),
        "forward_rel_dev": fmt(res["forward_rel_dev"]),
        "deferred_within_1pct": str(bool(np.all(res["deferred_rel_dev"] < 0.01))).lower(),
        "forward_beyond_5pct": str(bool(np.all(res["forward_rel_dev"] > 0.05))).lower(),
    })


# -- relighting evaluation -----------------------------------------------------------

def relight_envmap(height: int = 32, width: int = 64):
    """A cool overhead sky with a soft warm lobe from -y, unlike the training light."""
    from .sampling import uv_to_dir

    v, u = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width,
                       indexing="ij")
    d = uv_to_dir(u, v)
    sky = (0.35 + 0.25 * np.maximum(d[..., 2], 0.0))[..., None] * np.array([0.7, 0.8, 1.0])
    lobe = np.exp(8.0 * (d @ np.array([0.3, -0.8, 0.52]) - 1.0))[..., None] * np.array([2.5, 1.8, 1.0])
    return (sky + lobe).astype(np.float32)


def relit_psnr(pred: HybridScene, gt: HybridScene, cam: Camera, envmap=None, k=None,
               spp: int = 256, seed: int = 0):
    """PSNR of ``pred`` relit under ``envmap`` against ``gt`` relit the same way.

    Both renders use MIS with the same seed and traced visibility. ``k`` (the
    base-colour rescale) multiplies the predicted albedo first. The score is
    taken on display-mapped colour over the ground-truth foreground.
    """
    from .postproc import psnr, tonemap_srgb

    env = relight_envmap() if envmap is None else envmap
    imgs = []
    for sc in (pred if k is None else rescale_albedo(pred, k), gt):
        sc = sc.copy()
        sc.light = EnvironmentLight(np.zeros((9, 3)), env)
        res = render_deferred(sc, cam, spp, "train", "mis", seed, bvh=build_bvh(sc.mesh),
                              use_envmap=True)
        imgs.append(res)
    p, g = imgs
    return psnr(tonemap_srgb(p.image), tonemap_srgb(g.image), g.fg), p.image, g.image


def roundtrip_experiment(seed: int = 0, steps: int = 2000, n_views: int = 24, size: int = 64,
                         view_spp: int = 128, train_spp: int = 32, n_held: int = 6, scene=None,
                         views=None):
    """Render views of the round-trip sphere, reset its BRDF, retrain and score.

    Returns a dict with the rescaled-albedo MAE, the mean relit PSNR over
    ``n_held`` held-out cameras, the rescale ``k`` and the training time.
    """
    import time

    from .trainer import TrainConfig, train_pbr

    gt = roundtrip_scene(4) if scene is None else scene
    if views is None:
        views = render_views(gt, orbit_cameras(n_views, size=size), spp=view_spp)
    t0 = time.perf_counter()
    out = train_pbr(reset_brdf(gt), views, steps, cfg=TrainConfig(spp=train_spp, seed=seed))
    train_s = time.perf_counter() - t0
    held = orbit_cameras(n_held, size=size, offset=0.7)
    mae, k = rescaled_albedo_mae(out, gt, held)
    scores = [relit_psnr(out, gt, cam, k=k, seed=seed)[0] for cam in held]
    return dict(mae=mae, psnr=float(np.mean(scores)), psnr_views=scores, k=k, train_s=train_s,
                scene=out)


# -- bake and denoiser checks ----------------------------------------------------------

def _display(img):
    from .postproc import tonemap_srgb

    return tonemap_srgb(np.asarray(img, dtype=np.float64))


def bake_psnr_change(scene: HybridScene, view: TrainView, spp: int = 64, seed: int = 0,
                     n_dirs: int = 256, degree: int = 2):
    """PSNR against ``view`` with baked minus traced visibility, both at ``spp``.

    Returns ``(delta_db, psnr_traced, psnr_baked)``; scores use display colour
    over the view's mask.
    """
    from .postproc import psnr
    from .visibility import finalize_bake

    bvh = build_bvh(scene.mesh)
    baked, _ = finalize_bake(scene, bvh, n_dirs=n_dirs, degree=degree)
    traced = render_deferred(scene, view.camera, spp, "train", "fibonacci", seed, bvh=bvh)
    bk = render_deferred(baked, view.camera, spp, "baked", "fibonacci", seed)
    m = view.mask > 0.5
    a = psnr(_display(traced.image), _display(view.image), m)
    b = psnr(_display(bk.image), _display(view.image), m)
    return b - a, a, b


def open_plate_scene(n: int = 6):
    """A single upward-facing plate: nothing can occlude any of its Gaussians."""
    from .hybrid_mesh import plane

    sc = bind_gaussians(plane(2.0, n), alpha_init=0.95, light=EnvironmentLight(np.zeros((9, 3)),
                                                                                  relight_envmap()))
    g = sc.gaussians
    g.raw_albedo[:] = logit(np.array([0.6, 0.5, 0.4]))
    g.raw_rough[:] = logit(0.5)
    g.raw_metal[:] = -30.0
    cam = Camera.look_at([0.4, -2.0, 2.6], [0, 0, 0], fov_deg=40, width=32, height=32)
    return sc, cam


def open_scene_bake_error(spp: int = 256, seed: int = 0, n_dirs: int = 256, degree: int = 2):
    """Largest relative per-pixel gap between baked and traced relit renders of the plate."""
    from .visibility import finalize_bake

    sc, cam = open_plate_scene()
    bvh = build_bvh(sc.mesh)
    baked, _ = finalize_bake(sc, bvh, n_dirs=n_dirs, degree=degree)
    a = render_deferred(sc, cam, spp, "train", "mis", seed, bvh=bvh, use_envmap=True)
    b = render_deferred(baked, cam, spp, "baked", "mis", seed, use_envmap=True)
    m = a.fg
    return float(np.max(np.abs(b.image[m] - a.image[m]) / np.maximum(a.image[m], 1e-12)))


def albedo_edges(gbuffer, mask, tol: float = 0.1):
    """Pixels where the opacity-normalized G-buffer albedo jumps by more than ``tol``.

    A pixel is marked when any channel differs from its right or lower
    neighbour by more than ``tol``; both pixels of the pair are marked. Only
    pairs at least two pixels inside ``mask`` count, so the silhouette is left
    out.
    """
    from scipy import ndimage

    gb = gbuffer.values() if hasattr(gbuffer, "values") else gbuffer
    o = np.asarray(gb.opacity, dtype=np.float64)
    alb = np.asarray(gb.albedo, dtype=np.float64)
    if not getattr(gb, "normalized", False):
        alb = alb / np.where(o > 0, o, 1.0)[..., None]
    inner = ndimage.binary_erosion(mask, iterations=2)
    e = np.zeros(o.shape, dtype=bool)
    for ax in (0, 1):
        jump = np.abs(np.diff(alb, axis=ax)).max(axis=-1) > tol
        a = np.take(inner, range(o.shape[ax] - 1), axis=ax)
        b = np.take(inner, range(1, o.shape[ax]), axis=ax)
        jump &= a & b
        pad_lo = [(0, 0), (0, 0)]
        pad_hi = [(0, 0), (0, 0)]
        pad_lo[ax] = (0, 1)
        pad_hi[ax] = (1, 0)
        e |= np.pad(jump, pad_lo) | np.pad(jump, pad_hi)
    return e


def edge_map(img, region, frac: float = 0.3):
    """Pixels in ``region`` whose display-colour gradient exceeds ``frac`` of the largest there.

    The gradient is the Euclidean norm of the per-channel Sobel responses, so
    edges between colours of equal brightness still show up.
    """
    from scipy import ndimage

    d = _display(img)
    g = np.sqrt(sum(ndimage.sobel(d[..., c], ax) ** 2 for c in range(d.shape[-1]) for ax in (0, 1)))
    g = np.where(region, g, 0.0)
    return g > frac * g.max()


def edge_displacement(a, b):
    """Symmetric Hausdorff distance (pixels, Euclidean) between two edge maps."""
    from scipy import ndimage

    if not a.any() or not b.any():
        return np.inf if a.any() != b.any() else 0.0
    da = ndimage.distance_transform_edt(~a)
    db = ndimage.distance_transform_edt(~b)
    return float(max(db[a].max(), da[b].max()))


def denoise_check(scene: HybridScene | None = None, cam: Camera | None = None, spp: int = 16,
                  ref_spp: int = 4096, seed: int = 0):
    """Denoise a low-spp render and compare it with a high-spp reference.

    Returns a dict with the noisy and denoised MSE (foreground, linear colour)
    and the edge displacement of the denoised image against the reference.
    Edges are image-gradient edges inside a two-pixel band around the albedo
    discontinuities of the reference G-buffer, kept three pixels inside the
    foreground so the Sobel stencil never reaches the silhouette.
    """
    from scipy import ndimage
    from .postproc import bilateral_denoise

    sc = roundtrip_scene(4) if scene is None else scene
    cam = orbit_cameras(1, size=64, offset=0.7)[0] if cam is None else cam
    bvh = build_bvh(sc.mesh)
    noisy = render_deferred(sc, cam, spp, "train", "fibonacci", seed, bvh=bvh)
    ref = render_deferred(sc, cam, ref_spp, "train", "fibonacci", seed + 1, bvh=bvh)
    den = bilateral_denoise(noisy.image, noisy.gbuffer, scene_scale=1.0)
    m = ref.fg
    mse_noisy = float(np.mean((noisy.image[m] - ref.image[m]) ** 2))
    mse_den = float(np.mean((den[m] - ref.image[m]) ** 2))
    band = ndimage.binary_dilation(albedo_edges(ref.gbuffer, m), iterations=2)
    band &= ndimage.binary_erosion(m, iterations=3)
    edges = edge_displacement(edge_map(den, band), edge_map(ref.image, band))
    return dict(mse_noisy=mse_noisy, mse_denoised=mse_den, reduction=1.0 - mse_den / mse_noisy,
                edge_px=edges, denoised=den, noisy=noisy.image, reference=ref.image)


__all__ = ["tiny_scene", "orbit_cameras", "default_sh_light", "roundtrip_scene", "fit_radiance_sh",
           "render_views", "reset_brdf", "albedo_maps", "rescaled_albedo_mae", "rescale_albedo", "sky_envmap",
           "sun_direction", "sun_shadowed", "hidden_splats", "hidden_rig", "plate_hits",
           "analytic_plate", "demo_hidden", "hidden_report", "relight_envmap", "relit_psnr",
           "roundtrip_experiment",
           "bake_psnr_change", "open_plate_scene", "open_scene_bake_error", "albedo_edges", "edge_map",
           "edge_displacement", "denoise_check",
           "ROUNDTRIP_ALBEDO", "ROUNDTRIP_ROUGHNESS", "HIDDEN", "PLATE_BRDF"]
