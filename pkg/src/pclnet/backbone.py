"""Four-stage convolutional feature pyramid (a light ResNet18 stand-in)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LEAKY_GAIN, Conv2d, Module

STRIDES = (4, 8, 16, 32)


@dataclass
class PyramidFeatures:
    levels: list  # Tensor per level, finest first

    def __getitem__(self, i) -> Tensor:
        return self.levels[i]

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def shapes(self) -> list[tuple]:
        return [t.shape for t in self.levels]


class ResidualStage(Module):
    """Stride-2 entry conv followed by a residual pair of 3x3 convs."""

    def __init__(self, cin, cout, *, rng, dtype):
        self.entry = Conv2d(cin, cout, 3, stride=2, rng=rng, dtype=dtype, gain=LEAKY_GAIN)
        self.conv1 = Conv2d(cout, cout, 3, rng=rng, dtype=dtype, gain=LEAKY_GAIN)
        self.conv2 = Conv2d(cout, cout, 3, rng=rng, dtype=dtype, gain=LEAKY_GAIN)

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.leaky_relu(self.entry(x))
        r = self.conv2(ad.leaky_relu(self.conv1(y)))
        return ad.leaky_relu(ad.add(y, r))


class Backbone(Module):
    def __init__(self, channels=(16, 32, 64, 96), *, rng, dtype=np.float64, mean=0.5, std=0.5):
        self.mean = mean
        self.std = std
        self.stem = Conv2d(3, channels[0], 3, stride=2, rng=rng, dtype=dtype, gain=LEAKY_GAIN)
        self.stages = []
        cin = channels[0]
        for cout in channels:
            self.stages.append(ResidualStage(cin, cout, rng=rng, dtype=dtype))
            cin = cout

    @property
    def channels(self) -> tuple:
        return tuple(s.entry.out_channels for s in self.stages)

    def __call__(self, frames: Tensor) -> PyramidFeatures:
        return extract_pyramid(frames, self)


def extract_pyramid(frames: Tensor, net: Backbone) -> PyramidFeatures:
    """Features at strides 4, 8, 16 and 32 for frames in [0, 1]."""
    _, c, h, w = frames.shape
    if c != 3:
        raise ValueError(f"expected 3-channel frames, got {c} channels")
    if h % 32 or w % 32:
        raise ValueError(f"frame extents {h}x{w} must be divisible by 32")
    x = ad.scale(ad.add_scalar(frames, -net.mean), 1.0 / net.std)
    x = ad.leaky_relu(net.stem(x))
    levels = []
    for stage in net.stages:
        x = stage(x)
        levels.append(x)
    return PyramidFeatures(levels)


def extract_clip_pyramids(frames, net: Backbone) -> list[PyramidFeatures]:
    """Per-frame pyramids with shared weights.

    ``frames`` is a list of N x 3 x H x W tensors; they are run as one batch.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("empty clip")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ValueError("all frames in a clip must share a shape")
    n = shape[0]
    stacked = extract_pyramid(ad.concat(frames, axis=0), net)
    per_level = [ad.split(lv, 0, [n] * len(frames)) for lv in stacked.levels]
    return [PyramidFeatures([per_level[k][t] for k in range(4)]) for t in range(len(frames))]
