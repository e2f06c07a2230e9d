"""Joint clip augmentation: one random draw shared by every frame and flow."""

from __future__ import annotations

import numpy as np

from ..autodiff import bilinear_matrix
from .synthetic import Clip

OPS = ("crop", "scale", "hflip", "vflip")


def _resize(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = bilinear_matrix(arr.shape[-2], h)
    cols = bilinear_matrix(arr.shape[-1], w)
    return np.matmul(np.matmul(rows, arr), cols.T)


def augment_clip(
    clip: Clip,
    ops=OPS,
    seed: int = 0,
    crop_size: tuple | None = None,
    scale_range: tuple = (0.9, 1.1),
    flip_prob: float = 0.5,
) -> Clip:
    """Apply scale -> crop -> flips with parameters drawn once for the clip.

    Flow values follow the geometry: horizontal flips negate u, vertical flips
    negate v, scaling multiplies both by the resize ratio, cropping only moves
    the origin.  Without an explicit ``crop_size`` the crop keeps the largest
    multiple-of-32 window that fits.
    """
    ops = tuple(ops)
    unknown = set(ops) - set(OPS)
    if unknown:
        raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    frames = np.asarray(clip.frames, dtype=np.float64)
    flows = None if clip.gt_flows is None else np.asarray(clip.gt_flows, dtype=np.float64)

    if "scale" in ops:
        s = rng.uniform(*scale_range)
        h, w = frames.shape[2:]
        nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        frames = _resize(frames, nh, nw)
        if flows is not None:
            flows = _resize(flows, nh, nw)
            flows[:, 0] *= nw / w
            flows[:, 1] *= nh / h

    h, w = frames.shape[2:]
    if "crop" in ops or "scale" in ops:
        ch, cw = crop_size if crop_size is not None else ((h // 32) * 32, (w // 32) * 32)
        if ch > h or cw > w or ch < 1 or cw < 1:
            raise ValueError(f"crop {ch}x{cw} does not fit frame {h}x{w}")
        if ch % 32 or cw % 32:
            raise ValueError(f"crop {ch}x{cw} must be divisible by 32")
        y0 = int(rng.integers(0, h - ch + 1)) if "crop" in ops else (h - ch) // 2
        x0 = int(rng.integers(0, w - cw + 1)) if "crop" in ops else (w - cw) // 2
        frames = frames[:, :, y0 : y0 + ch, x0 : x0 + cw]
        if flows is not None:
            flows = flows[:, :, y0 : y0 + ch, x0 : x0 + cw]

    if "hflip" in ops and rng.uniform() < flip_prob:
        frames = frames[..., ::-1]
        if flows is not None:
            flows = flows[..., ::-1] * np.array([-1.0, 1.0])[None, :, None, None]
    if "vflip" in ops and rng.uniform() < flip_prob:
        frames = frames[..., ::-1, :]
        if flows is not None:
            flows = flows[..., ::-1, :] * np.array([1.0, -1.0])[None, :, None, None]

    frames = np.ascontiguousarray(frames)
    flows = None if flows is None else np.ascontiguousarray(flows)
    return Clip(frames, flows, clip.source)
