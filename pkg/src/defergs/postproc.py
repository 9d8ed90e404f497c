"""Image-space post-processing: joint bilateral denoiser, sRGB mapping, PSNR and
the median base-colour rescale used before albedo metrics.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

SRGB_KNEE = 0.0031308
PSNR_CAP = 99.0


def tonemap_srgb(x):
    """Clip to [0, 1] then apply the piecewise sRGB transfer (arrays or Var)."""
    x = np.clip(x, 0.0, 1.0)
    xv = ad.value(x)
    hi = 1.055 * np.maximum(x, SRGB_KNEE) ** (1.0 / 2.4) - 0.055
    return np.where(xv <= SRGB_KNEE, 12.92 * x, hi)


def srgb_to_linear(y):
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, 1.0)
    return np.where(y <= 0.04045, y / 12.92, ((y + 0.055) / 1.055) ** 2.4)


def psnr(pred, gt, mask=None) -> float:
    """10 log10(1 / MSE) over masked pixels; identical inputs give 99 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("psnr: shape mismatch")
    if mask is None:
        mask = np.ones(pred.shape[:2], dtype=bool)
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ValueError("psnr: empty mask")
    mse = float(np.mean((pred[mask] - gt[mask]) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def basecolor_rescale(pred_albedo, gt_albedo, mask, eps: float = 1e-4):
    """Per-channel median of gt / pred over masked pixels with pred > eps."""
    pred = np.asarray(pred_albedo, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_albedo, dtype=np.float64).reshape(-1, 3)
    m = np.asarray(mask).astype(bool).ravel()
    out = np.empty(3)
    for c in range(3):
        ok = m & (pred[:, c] > eps)
        if not ok.any():
            raise ValueError("basecolor_rescale: no valid pixels")
        out[c] = np.median(gt[ok, c] / pred[ok, c])
    return out


def bilateral_denoise(image, gbuffer, radius: int = 3, sigma_depth: float | None = None,
                      sigma_normal: float = 0.1, sigma_albedo: float = 0.1, scene_scale: float = 1.0,
                      demodulate: bool = True, tau_fg: float = 0.5):
    """Joint bilateral filter guided by depth, normal and albedo maps.

    The image is divided by (albedo + 1e-3) before filtering and multiplied
    back afterwards so texture edges are not blurred. The albedo used for
    that matches the G-buffer convention (opacity-premultiplied unless the
    buffer is normalized), while the guides use opacity-normalized depth and
    albedo. Pixels with opacity at or below ``tau_fg`` were not shaded by the
    renderer (they hold background), so they are neither filtered nor used as
    neighbours. Keep ``tau_fg`` equal to the threshold used when rendering.
    """
    img = np.asarray(image, dtype=np.float64)
    gb = gbuffer.values() if hasattr(gbuffer, "values") else gbuffer
    H, W = img.shape[:2]
    if sigma_depth is None:
        sigma_depth = 0.05 * scene_scale
    o = np.asarray(gb.opacity, dtype=np.float64)
    valid = o > tau_fg
    safe_o = np.where(valid, o, 1.0)
    norm = np.ones_like(o) if getattr(gb, "normalized", False) else safe_o
    depth = np.asarray(gb.depth) / norm
    nrm = np.asarray(gb.normal, dtype=np.float64)
    nrm = nrm / np.maximum(np.linalg.norm(nrm, axis=-1, keepdims=True), 1e-12)
    stored = np.asarray(gb.albedo, dtype=np.float64)
    alb = stored / norm[..., None]
    mod = stored + 1e-3 if demodulate else np.ones_like(img)
    sig = img / mod

    acc = np.zeros_like(img)
    wsum = np.zeros((H, W))
    pad = radius
    P = lambda a, v=0.0: np.pad(a, [(pad, pad), (pad, pad)] + [(0, 0)] * (a.ndim - 2),
                                constant_values=v)
    sig_p, dep_p, nrm_p, alb_p, val_p = P(sig), P(depth), P(nrm), P(alb), P(valid, False)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            sl = (slice(pad + dy, pad + dy + H), slice(pad + dx, pad + dx + W))
            w = np.exp(-(dep_p[sl] - depth) ** 2 / (2 * sigma_depth ** 2))
            w = w * np.exp(-(1.0 - np.clip((nrm_p[sl] * nrm).sum(-1), -1, 1)) / sigma_normal)
            w = w * np.exp(-((alb_p[sl] - alb) ** 2).sum(-1) / (2 * sigma_albedo ** 2))
            w = np.where(val_p[sl], w, 0.0)
            acc += w[..., None] * sig_p[sl]
            wsum += w
    out = np.where((wsum > 0)[..., None], acc / np.maximum(wsum, 1e-300)[..., None], sig) * mod
    return np.where(valid[..., None], out, img)
