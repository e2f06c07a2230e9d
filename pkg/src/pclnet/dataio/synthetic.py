"""Synthetic clips rendered from continuous textures with analytic flow."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Clip:
    """l frames (l x 3 x H x W, values in [0, 1]) and optional l-1 flows (l-1 x 2 x H x W)."""

    frames: np.ndarray
    gt_flows: np.ndarray | None = None
    source: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"frames must be l x 3 x H x W, got {self.frames.shape}")
        if self.gt_flows is not None:
            self.gt_flows = np.asarray(self.gt_flows)
            want = (len(self.frames) - 1, 2) + self.frames.shape[2:]
            if self.gt_flows.shape != want:
                raise ValueError(f"gt_flows shape {self.gt_flows.shape} != {want}")

    @property
    def length(self) -> int:
        return len(self.frames)

    @property
    def extent(self) -> tuple:
        return self.frames.shape[2:]


@dataclass
class SyntheticSpec:
    height: int = 64
    width: int = 64
    length: int = 2
    texture: str = "noise"  # noise | checker | blobs
    motion: str = "translation"  # translation | rotation | affine
    translation: tuple = (0.0, 0.0)
    angle: float = 0.0  # radians per frame, about the image centre
    affine: np.ndarray | None = None  # 2 x 3, frame t coordinates -> frame t+1
    texture_params: dict = field(default_factory=dict)

    def motion_matrix(self) -> np.ndarray:
        """3 x 3 homogeneous map taking frame-t pixel coordinates to frame t+1."""
        m = np.eye(3)
        if self.motion == "translation":
            m[0, 2], m[1, 2] = self.translation
        elif self.motion == "rotation":
            cx, cy = (self.width - 1) / 2.0, (self.height - 1) / 2.0
            c, s = np.cos(self.angle), np.sin(self.angle)
            r = np.array([[c, -s], [s, c]])
            m[:2, :2] = r
            m[:2, 2] = np.array([cx, cy]) - r @ np.array([cx, cy])
        elif self.motion == "affine":
            if self.affine is None:
                raise ValueError("affine motion needs a 2 x 3 matrix")
            m[:2] = np.asarray(self.affine, dtype=float)
        else:
            raise ValueError(f"unknown motion model {self.motion!r}")
        return m


class Texture:
    """Continuous RGB texture that can be evaluated at any real coordinate."""

    def __init__(self, kind: str, rng: np.random.Generator, **params):
        self.kind = kind
        if kind == "noise":
            k = params.get("components", 24)
            lo, hi = params.get("wavelengths", (10.0, 40.0))
            lam = rng.uniform(lo, hi, size=(3, k))
            theta = rng.uniform(0, 2 * np.pi, size=(3, k))
            self.freq = np.stack([np.cos(theta), np.sin(theta)], axis=-1) * (2 * np.pi / lam)[..., None]
            self.phase = rng.uniform(0, 2 * np.pi, size=(3, k))
            amp = rng.uniform(0.5, 1.0, size=(3, k))
            # sum of k cosines has std sqrt(sum a^2 / 2); rescale to a target contrast
            self.amp = amp * params.get("contrast", 0.22) / np.sqrt((amp**2).sum(axis=1, keepdims=True) / 2)
        elif kind == "checker":
            self.period = params.get("period", 8.0)
            self.colors = rng.uniform(0.1, 0.9, size=(2, 3))
        elif kind == "blobs":
            k = params.get("count", 30)
            span = params.get("span", 96.0)
            self.centres = rng.uniform(-span / 2, span * 1.5, size=(k, 2))
            self.sigma = rng.uniform(4.0, 12.0, size=k)
            self.colors = rng.uniform(-0.5, 0.5, size=(k, 3))
        else:
            raise ValueError(f"unknown texture kind {kind!r}")

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """3 x H x W values for coordinate grids ``x``, ``y``."""
        if self.kind == "noise":
            arg = self.freq[..., 0, None, None] * x + self.freq[..., 1, None, None] * y + self.phase[..., None, None]
            val = 0.5 + (self.amp[..., None, None] * np.cos(arg)).sum(axis=1)
        elif self.kind == "checker":
            cell = (np.floor(x / self.period) + np.floor(y / self.period)) % 2
            val = np.where(cell[None] > 0, self.colors[1][:, None, None], self.colors[0][:, None, None])
        else:
            val = np.full((3,) + x.shape, 0.5)
            for (cx, cy), s, col in zip(self.centres, self.sigma, self.colors):
                g = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
                val = val + col[:, None, None] * g
        return np.clip(val, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> Clip:
    """Render a clip whose frame t+1 is frame t moved by the motion in ``spec``.

    Each frame is sampled directly from the continuous texture, so no resampling
    blur accumulates along the clip.
    """
    h, w = spec.height, spec.width
    if h % 32 or w % 32:
        raise ValueError(f"synthetic extents {h}x{w} must be divisible by 32")
    if spec.length < 2:
        raise ValueError("a clip needs at least 2 frames")
    step = spec.motion_matrix()
    ys, xs = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    pts = np.stack([xs, ys, np.ones_like(xs)])
    moved = np.tensordot(step, pts, axes=1)
    flow = moved[:2] - pts[:2]
    limit = min(h, w) / 4.0
    if np.abs(flow).max() > limit:
        raise ValueError(f"motion of {np.abs(flow).max():.2f} px exceeds extent/4 = {limit}")

    texture = Texture(spec.texture, np.random.default_rng(seed), **spec.texture_params)
    frames = []
    back = np.eye(3)  # frame-k coordinates -> frame-0 coordinates
    inv = np.linalg.inv(step)
    for _ in range(spec.length):
        src = np.tensordot(back, pts, axes=1)
        frames.append(texture(src[0], src[1]))
        back = back @ inv
    flows = np.repeat(flow[None], spec.length - 1, axis=0)
    return Clip(np.stack(frames), flows, f"synthetic-{spec.motion}-{seed}")


def translation_clips(count: int, length: int = 6, size: int = 64, max_shift: float = 3.0, seed: int = 0,
                      texture: str = "noise") -> list[Clip]:
    """Clips with one constant translation each, drawn uniformly from the disc |t| <= max_shift."""
    rng = np.random.default_rng(seed)
    clips = []
    for k in range(count):
        r = max_shift * np.sqrt(rng.uniform())
        a = rng.uniform(0, 2 * np.pi)
        spec = SyntheticSpec(size, size, length, texture, "translation", (r * np.cos(a), r * np.sin(a)))
        clips.append(generate_synthetic(spec, seed=int(rng.integers(2**31))))
    return clips
