"""Command-line entry point: ``defergs <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error (the message names the
module that raised).
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback
from pathlib import Path

import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _set_threads(n):
    # the kernels are serial; the flag is validated and kept for scripts
    if n is not None and n < 1:
        raise UsageError("--threads must be >= 1")
    return n or os.cpu_count() or 1


def _out_stem(out):
    p = Path(out)
    if p.suffix.lower() in (".pfm", ".png"):
        p = p.with_suffix("")
    return p


def _write_image(stem: Path, linear):
    from .io import write_pfm, write_png
    from .postproc import tonemap_srgb

    write_pfm(stem.with_suffix(".pfm"), linear)
    write_png(stem.with_suffix(".png"), tonemap_srgb(linear))


def _load_scene(path, envmap=None):
    from .io import load_scene, read_pfm
    from .scene_model import EnvironmentLight

    sc = load_scene(path)
    if envmap:
        sc.light = EnvironmentLight(sc.light.sh_global, read_pfm(envmap))
    return sc


def _render(scene, cam, args, bvh=None):
    from .postproc import bilateral_denoise
    from .splat_raster import render_deferred, render_forward

    mode = "baked" if args.visibility == "baked" else "train"
    if mode == "baked" and not scene.baked:
        raise ValueError("baked visibility requested but the scene has not been baked")
    strategy = args.strategy
    if args.mode == "deferred":
        res = render_deferred(scene, cam, args.spp, mode, strategy, args.seed, bvh=bvh,
                              normalized=args.normalized)
    else:
        res = render_forward(scene, cam, args.spp, strategy, args.seed, bvh=bvh, mode=mode,
                             normalized=args.normalized)
    img = np.asarray(res.image)
    if args.denoise:
        v = scene.mesh.vertices
        scale = float(np.linalg.norm(v.max(0) - v.min(0))) if len(v) else 1.0
        img = bilateral_denoise(img, res.gbuffer, scene_scale=scale)
    return img


def cmd_render(args):
    from .io import read_cameras

    scene = _load_scene(args.scene, args.envmap)
    cams = read_cameras(args.camera)
    stem = _out_stem(args.out)
    for i, cam in enumerate(cams):
        s = stem if len(cams) == 1 else stem.with_name(f"{stem.name}_{i:03d}")
        _write_image(s, _render(scene, cam, args))
        print(f"wrote {s}.pfm {s}.png")
    return 0


def cmd_relight(args):
    from .io import read_cameras
    from .visibility import build_bvh

    scene = _load_scene(args.scene, args.envmap)
    cams = read_cameras(args.cameras)
    out = Path(args.out)
    bvh = None if args.visibility == "baked" else build_bvh(scene.mesh)
    for i, cam in enumerate(cams):
        _write_image(out / f"relit_{i:03d}", _render(scene, cam, args, bvh))
    print(f"wrote {len(cams)} relit views to {out}")
    return 0


def cmd_train(args):
    from .trainer import TrainConfig, run_full

    cfg = TrainConfig.from_file(args.config)
    if args.out:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    res = run_full(cfg)
    for k, v in res.metrics.items():
        print(f"{k} = {v}")
    print(f"wrote {cfg.out}")
    return 0


def cmd_bake(args):
    from .io import save_scene
    from .visibility import finalize_bake

    scene = _load_scene(args.scene)
    baked, resid = finalize_bake(scene, n_dirs=args.dirs, degree=args.degree)
    save_scene(baked, args.out)
    rms = float(np.sqrt(np.mean(resid ** 2))) if len(resid) else 0.0
    print(f"baked {len(resid)} Gaussians, residual rms {rms:.4g}; wrote {args.out}")
    return 0


def cmd_stats_opacity(args):
    from .hybrid_mesh import opacity_depth_stats, stats_csv
    from .io import atomic_write
    from .splat_raster import gaussian_geometry

    scene = _load_scene(args.scene)
    geom = gaussian_geometry(scene)
    rows, _ = opacity_depth_stats(geom.mu, geom.alpha, args.bins)
    atomic_write(args.out, stats_csv(rows).encode("utf-8"))
    print(f"wrote {args.out}")
    return 0


def cmd_demo_hidden(args):
    from .io import atomic_write
    from .rigs import demo_hidden, hidden_report

    out = Path(args.out)
    res = demo_hidden(spp=args.spp, forward_spp=args.forward_spp, seed=args.seed)
    _write_image(out / "deferred", res["deferred"])
    _write_image(out / "forward", res["forward"])
    report = hidden_report(res)
    atomic_write(out / "report.txt", report.encode("utf-8"))
    sys.stdout.write(report)
    return 0


def _read_any(path: Path):
    from .io import read_pfm, read_png
    from .postproc import tonemap_srgb

    if path.suffix.lower() == ".pfm":
        return tonemap_srgb(read_pfm(path).astype(np.float64))
    return read_png(path)


def cmd_eval(args):
    from .postproc import basecolor_rescale, psnr

    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in gt_dir.iterdir() if p.suffix.lower() in (".png", ".pfm"))
    if not names:
        raise FileNotFoundError(f"no .png or .pfm images in {gt_dir}")
    scores = []
    for name in names:
        pp = pred_dir / name
        if not pp.exists():
            raise FileNotFoundError(f"missing prediction {pp}")
        pred, gt = _read_any(pp), _read_any(gt_dir / name)
        mask = None
        if args.mask_dir:
            mask = _read_any(Path(args.mask_dir) / name)[..., 0] > 0.5
        if args.rescale_basecolor:
            m = np.ones(gt.shape[:2], dtype=bool) if mask is None else mask
            pred = np.clip(pred * basecolor_rescale(pred, gt, m), 0.0, 1.0)
        s = psnr(pred, gt, mask)
        scores.append(s)
        print(f"{name},{s:.4f}")
    print(f"mean,{np.mean(scores):.4f}")
    return 0


def cmd_gradcheck(args):
    from .io import load_views
    from .losses import EvalConfig, check_gradients
    from .rigs import tiny_scene

    if args.scene == "tiny":
        scene, view = tiny_scene(args.seed + 1)
    else:
        if not args.views:
            raise UsageError("gradcheck on a scene file needs --views")
        scene = _load_scene(args.scene)
        view = load_views(args.views)[0]
    cfg = EvalConfig(spp=args.spp, seed=args.seed)
    res = check_gradients(scene, view, cfg=cfg, max_per_group=args.max_per_group, h=args.h)
    print("group,max_rel_err")
    for k, v in res.items():
        print(f"{k},{v:.3e}")
    ok = all(v < args.tol for v in res.values())
    print("PASS" if ok else "FAIL")
    return 0 if ok else 2


def build_parser():
    p = _Parser(prog="defergs", description="Deferred physically-based Gaussian splatting (CPU).")
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=None)
        return sp

    def shading(sp, spp):
        sp.add_argument("--spp", type=int, default=spp)
        sp.add_argument("--strategy", choices=("fibonacci", "mis", "light", "ggx"), default=None)
        sp.add_argument("--visibility", choices=("traced", "baked"), default="traced")
        sp.add_argument("--denoise", action="store_true")
        sp.add_argument("--normalized", action="store_true")
        sp.add_argument("--envmap", default=None)

    r = common(sub.add_parser("render", help="render views of a scene"))
    r.add_argument("--scene", required=True)
    r.add_argument("--camera", required=True)
    r.add_argument("--mode", choices=("forward", "deferred"), default="deferred")
    r.add_argument("--out", required=True)
    shading(r, 64)
    r.set_defaults(func=cmd_render)

    t = sub.add_parser("train", help="stage 2, PBR training and bake from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--threads", type=int, default=None)
    t.set_defaults(func=cmd_train)

    rl = common(sub.add_parser("relight", help="render a scene under a new environment map"))
    rl.add_argument("--scene", required=True)
    rl.add_argument("--envmap", required=True)
    rl.add_argument("--cameras", required=True)
    rl.add_argument("--out", required=True)
    rl.add_argument("--spp", type=int, default=64)
    rl.add_argument("--strategy", choices=("fibonacci", "mis", "light", "ggx"), default="mis")
    rl.add_argument("--visibility", choices=("traced", "baked"), default="baked")
    rl.add_argument("--denoise", action="store_true")
    rl.add_argument("--normalized", action="store_true")
    rl.set_defaults(func=cmd_relight, mode="deferred")

    b = common(sub.add_parser("bake", help="bake visibility SH into a scene"))
    b.add_argument("--scene", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--dirs", type=int, default=256)
    b.add_argument("--degree", type=int, default=2)
    b.set_defaults(func=cmd_bake)

    s = common(sub.add_parser("stats-opacity", help="opacity versus depth inside the hull (CSV)"))
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bins", type=int, default=10)
    s.set_defaults(func=cmd_stats_opacity)

    d = common(sub.add_parser("demo-hidden", help="hidden-splat forward vs deferred demonstration"))
    d.add_argument("--out", required=True)
    d.add_argument("--spp", type=int, default=4096)
    d.add_argument("--forward-spp", type=int, default=64)
    d.set_defaults(func=cmd_demo_hidden)

    e = common(sub.add_parser("eval", help="PSNR over matching images in two directories"))
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--mask-dir", default=None)
    e.add_argument("--rescale-basecolor", action="store_true")
    e.set_defaults(func=cmd_eval)

    g = common(sub.add_parser("gradcheck", help="analytic versus finite-difference gradients"))
    g.add_argument("--scene", default="tiny")
    g.add_argument("--views", default=None)
    g.add_argument("--spp", type=int, default=8)
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-3)
    g.add_argument("--max-per-group", type=int, default=None)
    g.set_defaults(func=cmd_gradcheck)
    return p


def _failing_module(exc) -> str:
    mod = "defergs.cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        parts = Path(frame.filename).parts
        if "defergs" in parts:
            i = len(parts) - 1 - parts[::-1].index("defergs")
            mod = "defergs." + Path(*parts[i + 1:]).with_suffix("").as_posix().replace("/", ".")
    return mod


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "cmd", None):
            raise UsageError("missing subcommand")
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    try:
        _set_threads(getattr(args, "threads", None))
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 (report every runtime failure the same way)
        print(f"error in {_failing_module(e)}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
