"""Pyramid ConvLSTM motion concentration and motion-feature export."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import PyramidFeatures
from .nn import LEAKY_GAIN, Conv2d, ConvLSTMParams, ConvStack, Module, SPPDescriptor, convlstm_sequence, spp, spp_broadcast

FEATURE_MAGIC = b"PCLF"
FEATURE_VERSION = 1


@dataclass
class MotionFeature:
    level: int  # 1 (finest) .. 4
    timestep: int  # 2 .. l
    dense: Tensor  # N x 4*c_m x h x w
    descriptor: SPPDescriptor
    refined: Tensor  # pre-reduction refined hidden map, used by the coupled variant


class MotionFeatures:
    """MotionFeature records indexed by (level, timestep)."""

    def __init__(self, items: dict, timesteps: list[int]):
        self._items = items
        self.timesteps = timesteps

    def __getitem__(self, key) -> MotionFeature:
        return self._items[key]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items.values())

    def at(self, timestep: int) -> list[MotionFeature]:
        return [self._items[(lv, timestep)] for lv in (1, 2, 3, 4)]

    def descriptor_vectors(self) -> np.ndarray:
        """Array N x (l-1) x sum_levels(len(descriptor)), levels in order."""
        rows = [np.concatenate([f.descriptor.vector() for f in self.at(t)], axis=1) for t in self.timesteps]
        return np.stack(rows, axis=1)


class LevelParams(Module):
    def __init__(self, cin, hidden, pass_in, c_m, k, *, rng, dtype, forget_bias):
        self.lstm = ConvLSTMParams(cin + pass_in, hidden, k, rng=rng, dtype=dtype, forget_bias=forget_bias)
        self.refine = ConvStack(hidden, [hidden, hidden], rng=rng, dtype=dtype)
        self.reduce = Conv2d(hidden, c_m, 1, rng=rng, dtype=dtype, gain=LEAKY_GAIN)


class MotionConcentration(Module):
    """Per-level ConvLSTMs with fine-to-coarse passing of refined states."""

    def __init__(self, channels, c_m=16, k=3, bins=(1, 2, 4), *, rng, dtype=np.float64, forget_bias=1.0):
        self.c_m = c_m
        self.bins = tuple(bins)
        self.levels = []
        self.passes = []
        for i, c in enumerate(channels):
            pass_in = c_m if i > 0 else 0
            self.levels.append(LevelParams(c, c, pass_in, c_m, k, rng=rng, dtype=dtype, forget_bias=forget_bias))
            if i < len(channels) - 1:
                self.passes.append(Conv2d(c, c_m, 3, stride=2, rng=rng, dtype=dtype, gain=LEAKY_GAIN))

    @property
    def dense_channels(self) -> int:
        return self.c_m * (1 + len(self.bins))

    def __call__(self, pyramids) -> MotionFeatures:
        return concentrate(pyramids, self)


def concentrate(pyramids: list[PyramidFeatures], mc: MotionConcentration) -> MotionFeatures:
    """Turn per-frame pyramids into motion features for timesteps 2..l.

    Refinement and passing run on every timestep so that level i+1 sees a
    passed input at t=1 as well; only t >= 2 become motion features.
    """
    l = len(pyramids)
    if l < 2:
        raise ValueError(f"need at least 2 frames to concentrate motion, got {l}")
    nlev = len(mc.levels)
    for p in pyramids:
        if len(p) != nlev:
            raise ValueError(f"pyramid has {len(p)} levels, motion module expects {nlev}")
    n = pyramids[0][0].shape[0]
    items = {}
    passed = None
    for i, lp in enumerate(mc.levels):
        xs = [p[i] for p in pyramids]
        if xs[0].shape[1] + (mc.c_m if i else 0) != lp.lstm.in_channels:
            raise ValueError(f"level {i + 1}: feature channels {xs[0].shape[1]} do not match ConvLSTM input")
        if passed is not None:
            xs = [ad.concat_channels([x, q]) for x, q in zip(xs, passed)]
        states = convlstm_sequence(xs, lp.lstm)
        hidden = ad.concat([s.h for s in states], axis=0)
        refined = lp.refine(hidden)
        if i < nlev - 1:
            passed = ad.split(ad.leaky_relu(mc.passes[i](refined)), 0, [n] * l)
        latter = ad.narrow(refined, 0, n, l * n)
        reduced = ad.leaky_relu(lp.reduce(latter))
        desc = spp(reduced, mc.bins)
        _, _, h, w = reduced.shape
        dense = ad.concat_channels([reduced, spp_broadcast(desc, h, w)])
        per_t = ad.split(dense, 0, [n] * (l - 1))
        per_ref = ad.split(latter, 0, [n] * (l - 1))
        for t in range(2, l + 1):
            k = t - 2
            d = SPPDescriptor(desc.bins, [ad.narrow(m, 0, k * n, (k + 1) * n) for m in desc.maps])
            items[(i + 1, t)] = MotionFeature(i + 1, t, per_t[k], d, per_ref[k])
    return MotionFeatures(items, list(range(2, l + 1)))


def write_motion_features(sink, values: np.ndarray) -> None:
    """Write a clips x timesteps x length array as a PCLF feature file."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise ValueError(f"feature array must be clips x timesteps x length, got shape {values.shape}")
    header = FEATURE_MAGIC + struct.pack("<B3I", FEATURE_VERSION, *values.shape)
    payload = values.astype("<f4").tobytes()
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(header + payload)
    else:
        sink.write(header + payload)


def read_motion_features(source) -> np.ndarray:
    blob = Path(source).read_bytes() if isinstance(source, (str, Path)) else source.read()
    if blob[:4] != FEATURE_MAGIC:
        raise ValueError(f"bad feature-file magic {blob[:4]!r}")
    version, clips, steps, length = struct.unpack_from("<B3I", blob, 4)
    if version != FEATURE_VERSION:
        raise ValueError(f"unsupported feature-file version {version}")
    count = clips * steps * length
    body = blob[17:]
    if len(body) != 4 * count:
        raise ValueError(f"feature payload holds {len(body)} bytes, expected {4 * count}")
    return np.frombuffer(body, dtype="<f4").reshape(clips, steps, length).copy()


def export_motion_features(features: list[MotionFeatures], sink) -> np.ndarray:
    """Concatenate descriptors over levels, one row per clip, and write them."""
    blocks = [f.descriptor_vectors() for f in features]
    values = np.concatenate(blocks, axis=0)
    write_motion_features(sink, values)
    return values
