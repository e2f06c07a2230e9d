"""Middlebury color-wheel rendering of flow fields."""

from __future__ import annotations

import numpy as np

# hue segment lengths: red-yellow, yellow-green, green-cyan, cyan-blue, blue-magenta, magenta-red
SEGMENTS = (15, 6, 4, 11, 13, 6)


def make_colorwheel() -> np.ndarray:
    """55 x 3 table of wheel colors in 0..255."""
    ry, yg, gc, cb, bm, mr = SEGMENTS
    wheel = np.zeros((sum(SEGMENTS), 3))
    col = 0
    wheel[col : col + ry, 0] = 255
    wheel[col : col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col : col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col : col + yg, 1] = 255
    col += yg
    wheel[col : col + gc, 1] = 255
    wheel[col : col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col : col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col : col + cb, 2] = 255
    col += cb
    wheel[col : col + bm, 2] = 255
    wheel[col : col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col : col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col : col + mr, 0] = 255
    return wheel


def flow_to_color(flow, max_mag: float | None = None) -> np.ndarray:
    """Render a 2 x H x W (or 1 x 2 x H x W) flow as a 1 x 3 x H x W image in [0, 1].

    Hue follows the flow angle; saturation grows with magnitude relative to
    ``max_mag`` (default: the 99th-percentile magnitude).  Zero flow is white,
    magnitudes beyond ``max_mag`` are darkened.
    """
    arr = np.asarray(getattr(flow, "data", flow), dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[0]
    u, v = arr[0], arr[1]
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(np.percentile(mag, 99)) if mag.size else 0.0
    if max_mag <= 0:
        max_mag = 1.0
    rad = mag / max_mag
    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = ((1 - f) * wheel[k0] + f * wheel[k1]) / 255.0
    inside = (rad <= 1)[..., None]
    col = np.where(inside, 1 - rad[..., None] * (1 - col), col * 0.75)
    return col.transpose(2, 0, 1)[None]
