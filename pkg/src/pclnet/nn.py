"""Parameterised building blocks: conv layers, the peephole ConvLSTM cell, SPP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SPP_BINS = (1, 2, 4)
CONTEXT_DILATIONS = (1, 2, 4, 8, 16, 1, 1)
# keeps activation variance constant through a conv followed by a leaky rectifier
LEAKY_GAIN = float(np.sqrt(2.0 / (1.0 + ad.LEAKY_SLOPE**2)))


class Module:
    """Container that discovers parameters through its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(arr, dtype=dtype), requires_grad=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, dilation=1, padding=None, *, rng, dtype=np.float64, gain=1.0):
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k // 2) if padding is None else padding
        fan_in = cin * k * k
        self.weight = _param(uniform_init(rng, (cout, cin, k, k), fan_in, gain), dtype)
        self.bias = _param(np.zeros(cout), dtype)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


# ---------------------------------------------------------------------------
# ConvLSTM

GATES = ("i", "f", "c", "o")


@dataclass
class ConvLSTMState:
    h: Tensor
    c: Tensor


class ConvLSTMParams(Module):
    """Weights of one peephole ConvLSTM layer.

    The four input kernels W_xi, W_xf, W_xc, W_xo are stored stacked along the
    output axis in that gate order (``w_x``), likewise the hidden kernels
    (``w_h``) and biases.  Peepholes are per-channel scales.
    """

    def __init__(self, cin, hidden, k=3, *, rng, dtype=np.float64, forget_bias=1.0):
        if k % 2 != 1:
            raise ValueError(f"ConvLSTM kernel size must be odd, got {k}")
        self.k = k
        self.hidden = hidden
        self.w_x = _param(uniform_init(rng, (4 * hidden, cin, k, k), cin * k * k), dtype)
        self.w_h = _param(uniform_init(rng, (4 * hidden, hidden, k, k), hidden * k * k), dtype)
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = forget_bias
        self.b = _param(b, dtype)
        self.w_ci = _param(np.zeros(hidden), dtype)
        self.w_cf = _param(np.zeros(hidden), dtype)
        self.w_co = _param(np.zeros(hidden), dtype)

    @property
    def in_channels(self) -> int:
        return self.w_x.shape[1]

    def kernel(self, gate: str, source: str = "x") -> np.ndarray:
        """View of a single gate kernel, e.g. ``kernel('f', 'h')`` is W_hf."""
        g = GATES.index(gate)
        w = self.w_x if source == "x" else self.w_h
        return w.data[g * self.hidden : (g + 1) * self.hidden]

    def zero_state(self, n, h, w, dtype=None) -> ConvLSTMState:
        dtype = dtype or self.w_x.dtype
        z = np.zeros((n, self.hidden, h, w), dtype=dtype)
        return ConvLSTMState(Tensor(z), Tensor(z.copy()))


def convlstm_step(x: Tensor, state: ConvLSTMState, p: ConvLSTMParams) -> ConvLSTMState:
    """One peephole ConvLSTM update.

    i = sig(Wxi*x + Whi*h + wci.c + bi), f likewise with c_prev,
    c' = f.c + i.tanh(Wxc*x + Whc*h + bc), o = sig(Wxo*x + Who*h + wco.c' + bo),
    h' = o.tanh(c').
    """
    if x.shape[1] != p.in_channels:
        raise ValueError(f"convlstm_step: input channels {x.shape[1]} != kernel in-channels {p.in_channels}")
    if x.shape[2:] != state.h.shape[2:]:
        raise ValueError(f"convlstm_step: input extents {x.shape[2:]} != state extents {state.h.shape[2:]}")
    pad = p.k // 2
    z = ad.add(ad.conv2d(x, p.w_x, p.b, 1, pad), ad.conv2d(state.h, p.w_h, None, 1, pad))
    zi, zf, zc, zo = ad.split(z, 1, [p.hidden] * 4)
    c_prev = state.c
    i = ad.sigmoid(ad.add(zi, ad.channel_mul(c_prev, p.w_ci)))
    f = ad.sigmoid(ad.add(zf, ad.channel_mul(c_prev, p.w_cf)))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, ad.tanh(zc)))
    o = ad.sigmoid(ad.add(zo, ad.channel_mul(c, p.w_co)))
    h = ad.mul(o, ad.tanh(c))
    return ConvLSTMState(h, c)


def convlstm_sequence(xs: Sequence[Tensor], p: ConvLSTMParams, initial: ConvLSTMState | None = None) -> list[ConvLSTMState]:
    if len(xs) < 2:
        raise ValueError(f"convlstm_sequence needs at least 2 frames, got {len(xs)}")
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise ValueError(f"convlstm_sequence: frame shapes differ {x.shape} vs {shape}")
    n, _, h, w = shape
    state = initial or p.zero_state(n, h, w, xs[0].dtype)
    states = []
    for x in xs:
        state = convlstm_step(x, state, p)
        states.append(state)
    return states


# ---------------------------------------------------------------------------
# spatial pyramid pooling


@dataclass
class SPPDescriptor:
    """Pooled maps per bin size plus the flattened fixed-length vector."""

    bins: tuple
    maps: list  # Tensor N x C x b x b per bin

    @property
    def channels(self) -> int:
        return self.maps[0].shape[1]

    def vector(self) -> np.ndarray:
        """N x (C * sum(b*b)) array, bins concatenated in order, each row-major."""
        n = self.maps[0].shape[0]
        return np.concatenate([m.data.reshape(n, -1) for m in self.maps], axis=1)

    def __len__(self) -> int:
        return self.channels * int(np.sum([b * b for b in self.bins]))


def adaptive_pool_matrix(n: int, bins: int) -> np.ndarray:
    a = np.zeros((bins, n))
    for i in range(bins):
        lo = (i * n) // bins
        hi = -((-(i + 1) * n) // bins)
        a[i, lo:hi] = 1.0 / (hi - lo)
    return a


def nearest_tile_matrix(bins: int, n: int) -> np.ndarray:
    a = np.zeros((n, bins))
    for o in range(n):
        a[o, (o * bins) // n] = 1.0
    return a


def spp(x: Tensor, bins: Sequence[int] = SPP_BINS) -> SPPDescriptor:
    """Adaptive average pooling of ``x`` to each b x b grid.

    Windows span ``floor(i*H/b)`` to ``ceil((i+1)*H/b)``, so a bin count larger
    than the extent repeats cells rather than failing.
    """
    _, _, h, w = x.shape
    maps = [
        ad.separable_linear(x, adaptive_pool_matrix(h, b), adaptive_pool_matrix(w, b), "spp")
        for b in bins
    ]
    return SPPDescriptor(tuple(bins), maps)


def spp_broadcast(d: SPPDescriptor, target_h: int, target_w: int) -> Tensor:
    tiles = [
        ad.separable_linear(m, nearest_tile_matrix(b, target_h), nearest_tile_matrix(b, target_w), "spp_broadcast")
        for b, m in zip(d.bins, d.maps)
    ]
    return ad.concat_channels(tiles)


# ---------------------------------------------------------------------------
# stacks


class ConvStack(Module):
    """Sequential 3x3 convs with leaky rectifiers; the last one optionally linear."""

    def __init__(self, cin, channels, dilations=None, *, rng, dtype=np.float64, linear_last=False):
        dilations = dilations or [1] * len(channels)
        if len(dilations) != len(channels):
            raise ValueError(f"{len(dilations)} dilations for {len(channels)} layers")
        self.linear_last = linear_last
        self.layers = []
        last = len(channels) - 1
        for k, (cout, d) in enumerate(zip(channels, dilations)):
            gain = 1.0 if linear_last and k == last else LEAKY_GAIN
            self.layers.append(Conv2d(cin, cout, 3, dilation=d, rng=rng, dtype=dtype, gain=gain))
            cin = cout

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if not (self.linear_last and k == last):
                x = ad.leaky_relu(x)
        return x


class DilatedConvStack(ConvStack):
    """Seven dilated 3x3 convs, shape preserving, leaky after all but the last."""

    def __init__(self, cin, channels, dilations=CONTEXT_DILATIONS, *, rng, dtype=np.float64):
        if len(dilations) != 7 or len(channels) != 7:
            raise ValueError(f"context stack needs 7 dilations and 7 widths, got {len(dilations)} and {len(channels)}")
        super().__init__(cin, list(channels), list(dilations), rng=rng, dtype=dtype, linear_last=True)
