"""Adam optimiser and the two-phase training schedule.

Stage 2 fits geometry, opacity, scale and radiance SH against the blended
radiance image. The PBR stage then optimises every group through the deferred
renderer. ``run_full`` chains both stages and bakes visibility at the end.
"""

from __future__ import annotations

import csv
import io as _io
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .losses import TERMS, EvalConfig, LossWeights, total_loss
from .scene_model import HybridScene
from .splat_raster import PARAM_GROUPS, apply_params, param_groups
from .visibility import build_bvh, finalize_bake

log = logging.getLogger(__name__)

STAGE2_GROUPS = ("vertices", "raw_alpha", "sh_rgb", "raw_scale")
LOG_COLUMNS = ("step", "l1", "pbr", "smooth", "o", "sc", "sr", "normal", "total")


@dataclass
class LrTable:
    position: float = 1.6e-4
    color_sh: float = 2.5e-3
    scale: float = 5e-3
    opacity: float = 5e-2
    base_color: float = 1e-2
    metallic: float = 1e-2
    roughness: float = 1e-2
    normal_rotation: float = 1e-3
    light_sh_dc: float = 2.5e-3
    light_sh_rest: float = 2.5e-4
    indirect_sh_dc: float = 1e-3
    indirect_sh_rest: float = 1e-4
    visibility_sh: float = 0.1  # only used if baked visibility is fine-tuned

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"learning rate '{f.name}' must be > 0")

    def rate(self, group: str, shape) -> np.ndarray | float:
        """Learning rate for a parameter group, per coefficient for SH lights."""
        simple = {"vertices": self.position, "sh_rgb": self.color_sh, "raw_scale": self.scale,
                  "raw_alpha": self.opacity, "raw_albedo": self.base_color,
                  "raw_metal": self.metallic, "raw_rough": self.roughness,
                  "q_normal": self.normal_rotation}
        if group in simple:
            return simple[group]
        if group == "sh_global":
            dc, rest = self.light_sh_dc, self.light_sh_rest
        elif group == "sh_aux":
            dc, rest = self.indirect_sh_dc, self.indirect_sh_rest
        else:
            raise KeyError(f"no learning rate for group '{group}'")
        lr = np.full(shape, rest)
        lr[..., 0, :] = dc  # coefficient axis is second to last
        return lr


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    nan_count: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr_table: LrTable):
    """One bias-corrected Adam update over the groups present in ``grads``.

    Returns ``(new_params, state)``; ``params`` itself is not modified.
    Non-finite gradient entries are replaced by zero and counted.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = dict(params)
    for k, g in grads.items():
        p = np.asarray(params[k], dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for '{k}'")
        bad = ~np.isfinite(g)
        if bad.any():
            state.nan_count += int(bad.sum())
            log.warning("zeroed %d non-finite gradient entries in '%s'", int(bad.sum()), k)
            g = np.where(bad, 0.0, g)
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        lr = lr_table.rate(k, p.shape)
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, state


@dataclass
class TrainConfig:
    stage2_steps: int = 1000
    pbr_steps: int = 2000
    spp: int = 32
    seed: int = 0
    bvh_every: int = 25
    bvh_tol: float = 1e-3
    exact_bvh: bool = False
    bake_dirs: int = 256
    bake_degree: int = 2
    normalized: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    lr: LrTable = field(default_factory=LrTable)
    scene: str = ""
    views: str = ""
    out: str = "out"
    stage2_scene: str = ""  # resume point: skip stage 2 when set

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        from .io import parse_kv

        kv = parse_kv(text)
        cfg = cls()
        for key, raw in kv.items():
            if key.startswith("lambda_") or key.startswith("weight_"):
                name = key.split("_", 1)[1]
                _set_field(cfg.weights, name, raw, key)
            elif key.startswith("lr_"):
                _set_field(cfg.lr, key[3:], raw, key)
            elif key in ("weights", "lr"):
                raise ValueError(f"'{key}' is a section, set its fields individually")
            else:
                _set_field(cfg, key, raw, key)
        cfg.lr.__post_init__()
        return cfg

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        text = Path(path).read_text(encoding="utf-8")
        cfg = cls.from_text(text)
        base = Path(path).parent
        for k in ("scene", "views", "out", "stage2_scene"):
            v = getattr(cfg, k)
            if v and not Path(v).is_absolute():
                setattr(cfg, k, str(base / v))
        return cfg


def _set_field(obj, name, raw, key):
    types = {f.name: f.type for f in fields(obj)}
    if name not in types:
        raise ValueError(f"unknown config key '{key}'")
    cur = getattr(obj, name)
    if isinstance(cur, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"config key '{key}' expects a boolean, got {raw!r}")
        val = low in ("true", "1", "yes")
    elif isinstance(cur, int):
        val = int(raw)
    elif isinstance(cur, float):
        val = float(raw)
    else:
        val = raw
    setattr(obj, name, val)


class ViewOrder:
    """Cyclic order over views, reshuffled at the start of every epoch."""

    def __init__(self, n: int, seed: int):
        if n < 1:
            raise ValueError("training needs at least one view")
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.queue = []

    def next(self) -> int:
        if not self.queue:
            self.queue = list(self.rng.permutation(self.n))
        return int(self.queue.pop(0))


class _BvhCache:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.bvh = None
        self.verts = None
        self.age = 0

    def get(self, scene: HybridScene):
        v = scene.mesh.vertices
        stale = (self.bvh is None or scene.bvh_dirty and (
            self.cfg.exact_bvh or self.age >= self.cfg.bvh_every
            or np.abs(v - self.verts).max() > self.cfg.bvh_tol))
        if stale:
            self.bvh = build_bvh(scene.mesh)
            self.verts = v.copy()
            self.age = 0
            scene.bvh_dirty = False
        self.age += 1
        return self.bvh


def _row(step, terms, total):
    r = {"step": step, "total": total}
    for k in TERMS:
        r[k] = float(terms.get(k, 0.0))
    return r


def _train(scene: HybridScene, views, steps: int, stage: str, groups, cfg: TrainConfig,
           history: list | None, state: AdamState | None):
    scene = scene.copy()
    if steps <= 0:
        return scene
    order = ViewOrder(len(views), cfg.seed)
    state = state or AdamState()
    cache = _BvhCache(cfg)
    ecfg = EvalConfig(stage=stage, spp=cfg.spp, seed=cfg.seed, normalized=cfg.normalized)
    for step in range(steps):
        view = views[order.next()]
        ecfg.frame = step
        bvh = cache.get(scene) if stage == "pbr" and not scene.baked else None
        try:
            rep = total_loss(scene, view, cfg.weights, ecfg, bvh=bvh, groups=groups)
        except FloatingPointError as e:
            raise FloatingPointError(f"{stage} step {step}: {e}") from None
        if not np.isfinite(rep.total):
            raise FloatingPointError(f"{stage} step {step}: non-finite total loss")
        if history is not None:
            history.append(_row(step, rep.terms, rep.total))
        params = param_groups(scene)
        new, state = adam_step({k: params[k] for k in groups}, rep.grads, state, cfg.lr)
        for k, v in new.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"{stage} step {step}: non-finite update in '{k}'")
        apply_params(scene, new)
        if "vertices" in new:
            scene.bvh_dirty = True
    return scene


def train_stage2(scene: HybridScene, views, steps: int, cfg: TrainConfig | None = None,
                 history: list | None = None, state: AdamState | None = None) -> HybridScene:
    """Fit vertices, opacity, radiance SH and scale to the radiance render."""
    return _train(scene, views, steps, "stage2", STAGE2_GROUPS, cfg or TrainConfig(), history, state)


def train_pbr(scene: HybridScene, views, steps: int, spp: int | None = None,
              cfg: TrainConfig | None = None, history: list | None = None,
              state: AdamState | None = None, groups=PARAM_GROUPS) -> HybridScene:
    """Optimise all groups through deferred shading with traced visibility."""
    cfg = cfg or TrainConfig()
    if spp is not None:
        cfg = _replace(cfg, spp=spp)
    return _train(scene, views, steps, "pbr", groups, cfg, history, state)


def _replace(cfg, **kw):
    from dataclasses import replace

    return replace(cfg, **kw)


def loss_csv(history) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in history:
        w.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_COLUMNS[1:]])
    return buf.getvalue()


@dataclass
class RunResult:
    scene: HybridScene
    history: list
    metrics: dict


def run_full(config: TrainConfig, scene: HybridScene | None = None, views=None,
             write: bool = True) -> RunResult:
    """Stage 2, then PBR, then the visibility bake; writes assets under ``config.out``."""
    from .io import atomic_write, format_kv, load_scene, load_views, save_scene

    if views is None:
        if not config.views:
            raise ValueError("config needs 'views' (directory of training views)")
        views = load_views(config.views)
    history = []
    resumed = bool(config.stage2_scene)
    if resumed:
        scene = load_scene(config.stage2_scene)
    else:
        if scene is None:
            if not config.scene:
                raise ValueError("config needs 'scene' or 'stage2_scene'")
            scene = load_scene(config.scene)
        scene = train_stage2(scene, views, config.stage2_steps, config, history)
        for r in history:
            r["stage"] = "stage2"
    off = len(history)
    pbr_hist = []
    scene = train_pbr(scene, views, config.pbr_steps, cfg=config, history=pbr_hist)
    for r in pbr_hist:
        r["step"] += off
    history += pbr_hist
    baked, resid = finalize_bake(scene, n_dirs=config.bake_dirs, degree=config.bake_degree)
    metrics = {
        "stage2_skipped": str(resumed).lower(),
        "steps": str(len(history)),
        "final_total": repr(history[-1]["total"]) if history else "nan",
        "initial_total": repr(history[0]["total"]) if history else "nan",
        "bake_residual_rms": repr(float(np.sqrt(np.mean(resid ** 2)))) if len(resid) else "0.0",
    }
    if write:
        out = Path(config.out)
        save_scene(baked, out / "scene.txt")
        atomic_write(out / "loss.csv", loss_csv(history).encode("utf-8"))
        atomic_write(out / "metrics.txt", format_kv(metrics).encode("utf-8"))
    return RunResult(baked, history, metrics)


__all__ = ["LrTable", "AdamState", "adam_step", "TrainConfig", "train_stage2", "train_pbr",
           "run_full", "RunResult", "loss_csv", "STAGE2_GROUPS", "LOG_COLUMNS", "ViewOrder"]
