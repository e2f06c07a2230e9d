"""Inverse warping, photometric similarity losses and end-point error."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import LossConfig


def inverse_warp(image: Tensor, flow: Tensor) -> Tensor:
    """Bilinearly sample ``image`` at (x + u, y + v), clamping to the border.

    Gradients flow to both the image and the flow; a clamped coordinate
    contributes no flow gradient.
    """
    n, c, h, w = image.shape
    if flow.shape != (n, 2, h, w):
        raise ValueError(f"inverse_warp: flow shape {flow.shape} does not match image {image.shape}")
    dtype = image.dtype
    gy, gx = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    sx = gx + flow.data[:, 0]
    sy = gy + flow.data[:, 1]
    # non-finite flow propagates as NaN output instead of an indexing error
    broken = ~(np.isfinite(sx) & np.isfinite(sy))
    if broken.any():
        sx = np.where(broken, 0, sx)
        sy = np.where(broken, 0, sy)
    inside_x = (sx >= 0) & (sx <= w - 1)
    inside_y = (sy >= 0) & (sy <= h - 1)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.minimum(np.floor(sx), max(w - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(sy), max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0.astype(dtype))[:, None]
    fy = (sy - y0.astype(dtype))[:, None]

    img = image.data
    bidx = np.arange(n)[:, None, None, None]
    cidx = np.arange(c)[None, :, None, None]

    def gather(yy, xx):
        return img[bidx, cidx, yy[:, None], xx[:, None]]

    v00, v01 = gather(y0, x0), gather(y0, x1)
    v10, v11 = gather(y1, x0), gather(y1, x1)
    # weighted form keeps integer sample points exact, including the clamped far edge
    top = (1 - fx) * v00 + fx * v01
    bottom = (1 - fx) * v10 + fx * v11
    out = (1 - fy) * top + fy * bottom
    if broken.any():
        out = np.where(broken[:, None], np.nan, out).astype(dtype)

    def back(g):
        gimg = None
        if image.requires_grad:
            base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
            acc = np.zeros(n * c * h * w, dtype=dtype)
            for yy, xx, wgt in (
                (y0, x0, (1 - fy) * (1 - fx)),
                (y0, x1, (1 - fy) * fx),
                (y1, x0, fy * (1 - fx)),
                (y1, x1, fy * fx),
            ):
                idx = base + (yy * w + xx)[:, None]
                acc += np.bincount(idx.reshape(-1), weights=(g * wgt).reshape(-1), minlength=acc.size).astype(dtype)
            gimg = acc.reshape(n, c, h, w)
        gflow = None
        if flow.requires_grad:
            dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
            dy = bottom - top
            gu = (g * dx).sum(axis=1) * inside_x
            gv = (g * dy).sum(axis=1) * inside_y
            gflow = np.stack([gu, gv], axis=1).astype(dtype)
        return gimg, gflow

    return ad._result(out, (image, flow), back, "inverse_warp")


def charbonnier_loss(a: Tensor, b: Tensor, alpha: float = 0.4, epsilon: float = 1e-6) -> Tensor:
    """Mean of ((a - b)^2 + eps)^alpha over every element."""
    return ad.mean(ad.power(ad.add_scalar(ad.square(ad.sub(a, b)), epsilon), alpha))


def mse(a: Tensor, b: Tensor) -> Tensor:
    return ad.mean(ad.square(ad.sub(a, b)))


def psnr_loss(a: Tensor, b: Tensor) -> Tensor:
    """10*log10(1 + MSE): zero for identical images, positive otherwise."""
    return ad.scale(ad.log(ad.add_scalar(mse(a, b), 1.0)), 10.0 / math.log(10.0))


def mssim_loss(a: Tensor, b: Tensor, window: int = 7, c1: float = 0.01**2, c2: float = 0.03**2) -> Tensor:
    """1 - mean SSIM over non-overlapping window x window tiles.

    Tiles that do not fit are dropped; statistics are population moments
    per tile and channel.
    """
    ad._same_shape(a, b, "mssim_loss")
    _, _, h, w = a.shape
    if window > h or window > w:
        raise ValueError(f"mssim_loss: window {window} exceeds extent {h}x{w}")

    def pool(t):
        return ad.avg_pool2d(t, window, window)

    mu_a, mu_b = pool(a), pool(b)
    mu_aa, mu_bb, mu_ab = ad.square(mu_a), ad.square(mu_b), ad.mul(mu_a, mu_b)
    var_a = ad.sub(pool(ad.square(a)), mu_aa)
    var_b = ad.sub(pool(ad.square(b)), mu_bb)
    cov = ad.sub(pool(ad.mul(a, b)), mu_ab)
    num = ad.mul(ad.add_scalar(ad.scale(mu_ab, 2.0), c1), ad.add_scalar(ad.scale(cov, 2.0), c2))
    den = ad.mul(ad.add_scalar(ad.add(mu_aa, mu_bb), c1), ad.add_scalar(ad.add(var_a, var_b), c2))
    ssim = ad.div(num, den)
    return ad.add_scalar(ad.scale(ad.mean(ssim), -1.0), 1.0)


def _guarded_sqrt(x: Tensor, guard: float) -> Tensor:
    # exact forward value, guarded derivative
    out = np.sqrt(x.data)
    return ad._result(out, (x,), lambda g: (g * 0.5 / np.sqrt(x.data + guard),), "guarded_sqrt")


def epe(pred: Tensor, gt: Tensor, valid_mask=None, guard: float = 1e-12) -> Tensor:
    """Mean end-point error; ``valid_mask`` is an optional N x 1 x H x W 0/1 array."""
    ad._same_shape(pred, gt, "epe")
    if pred.shape[1] != 2:
        raise ValueError(f"epe expects 2-channel flows, got {pred.shape[1]}")
    dist = _guarded_sqrt(ad.channel_sum(ad.square(ad.sub(pred, gt))), guard)
    if valid_mask is None:
        return ad.mean(dist)
    m = np.asarray(valid_mask.data if isinstance(valid_mask, Tensor) else valid_mask, dtype=pred.dtype)
    m = np.broadcast_to(m, dist.shape)
    count = m.sum()
    if count == 0:
        raise ValueError("epe: empty valid mask")
    return ad.scale(ad.sum(ad.mul(dist, Tensor(m))), 1.0 / count)


def epe_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel end-point error as a plain array."""
    return np.sqrt(((np.asarray(pred) - np.asarray(gt)) ** 2).sum(axis=-3))


def downsample_image(x: Tensor, stride: int) -> Tensor:
    return x if stride == 1 else ad.avg_pool2d(x, stride, stride)


def downsample_flow(flow: Tensor, stride: int) -> Tensor:
    return flow if stride == 1 else ad.scale(ad.avg_pool2d(flow, stride, stride), 1.0 / stride)


def similarity_loss(recon: Tensor, target: Tensor, cfg: LossConfig) -> Tensor:
    """Weighted sum of Charbonnier, modified PSNR and MSSIM terms."""
    terms = []
    if cfg.beta1:
        terms.append(ad.scale(charbonnier_loss(recon, target, cfg.alpha, cfg.epsilon), cfg.beta1))
    if cfg.beta2:
        terms.append(ad.scale(psnr_loss(recon, target), cfg.beta2))
    _, _, h, w = recon.shape
    if cfg.beta3 and min(h, w) >= cfg.ssim_window:
        terms.append(ad.scale(mssim_loss(recon, target, cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2), cfg.beta3))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def reconstruction_loss(frames: Sequence[Tensor], pyramids, cfg: LossConfig) -> Tensor:
    """Sum over timesteps and flow scales of the weighted similarity loss.

    At each scale both frames are average-pooled to the flow's stride and the
    later frame is warped back onto the earlier one.
    """
    frames = list(frames)
    if len(pyramids) != len(frames) - 1:
        raise ValueError(f"{len(frames)} frames need {len(frames) - 1} flow pyramids, got {len(pyramids)}")
    cache: dict = {}

    def pooled(t, s):
        key = (t, s)
        if key not in cache:
            cache[key] = downsample_image(frames[t], s)
        return cache[key]

    total = None
    for t, pyr in enumerate(pyramids):
        for s, flow, weight in zip(pyr.all_strides, pyr.all_fields, cfg.scale_weights):
            if not weight:
                continue
            recon = inverse_warp(pooled(t + 1, s), flow)
            term = ad.scale(similarity_loss(recon, pooled(t, s), cfg), weight)
            total = term if total is None else ad.add(total, term)
    return total


def multiscale_epe_loss(pyramids, gt_flows: Sequence[Tensor], scale_weights) -> Tensor:
    """Supervised counterpart: EPE against pooled ground truth at every scale."""
    if len(pyramids) != len(gt_flows):
        raise ValueError(f"{len(pyramids)} flow pyramids but {len(gt_flows)} ground-truth flows")
    total = None
    for pyr, gt in zip(pyramids, gt_flows):
        for s, flow, weight in zip(pyr.all_strides, pyr.all_fields, scale_weights):
            if not weight:
                continue
            term = ad.scale(epe(flow, downsample_flow(gt, s)), weight)
            total = term if total is None else ad.add(total, term)
    return total
