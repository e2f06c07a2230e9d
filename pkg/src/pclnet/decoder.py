"""Coarse-to-fine flow decoding from motion features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import PCLNET, PCLNETC
from .motion import MotionFeatures
from .nn import CONTEXT_DILATIONS, Conv2d, ConvStack, DilatedConvStack, Module

BLOCK_STRIDES = (32, 16, 8, 4, 2)


@dataclass
class FlowPyramid:
    """Five predicted fields at strides 32..2 and the full-resolution field."""

    flows: list  # Tensor N x 2 x h x w, coarsest first
    final: Tensor

    strides = BLOCK_STRIDES

    @property
    def all_fields(self) -> list[Tensor]:
        return list(self.flows) + [self.final]

    @property
    def all_strides(self) -> tuple:
        return BLOCK_STRIDES + (1,)

    def narrow(self, start: int, stop: int) -> "FlowPyramid":
        return FlowPyramid([ad.narrow(f, 0, start, stop) for f in self.flows], ad.narrow(self.final, 0, start, stop))


def upsample_flow(flow: Tensor) -> Tensor:
    """Double extent and displacement values."""
    return ad.scale(ad.upsample2x_bilinear(flow), 2.0)


class OFEBlock(Module):
    def __init__(self, cin, widths, *, rng, dtype, flow_gain=0.1, coupled=False):
        self.coupled = coupled
        self.convs = ConvStack(cin, list(widths), rng=rng, dtype=dtype)
        self.predict = Conv2d(widths[-1], 2, 3, rng=rng, dtype=dtype, gain=flow_gain)

    @property
    def in_channels(self) -> int:
        return self.convs.layers[0].in_channels


def ofe_block(block: OFEBlock, motion_feat=None, prev_feat=None, prev_flow=None, couple_feat=None):
    """Refine one scale: concat inputs, three convs, residual flow prediction.

    ``prev_feat`` and ``prev_flow`` must already be upsampled by the caller.
    """
    if motion_feat is None and prev_feat is None:
        raise ValueError("ofe_block needs a motion feature or a previous feature map")
    if couple_feat is not None and not block.coupled:
        raise ValueError("couple_feat is only accepted by PCLNetC blocks")
    inputs = [t for t in (motion_feat, couple_feat, prev_feat, prev_flow) if t is not None]
    hw = inputs[0].shape[2:]
    for t in inputs:
        if t.shape[2:] != hw:
            raise ValueError(f"ofe_block: spatial mismatch {t.shape[2:]} vs {hw}")
    x = ad.concat_channels(inputs)
    if x.shape[1] != block.in_channels:
        raise ValueError(f"ofe_block: got {x.shape[1]} input channels, block expects {block.in_channels}")
    feat = block.convs(x)
    flow = block.predict(feat)
    if prev_flow is not None:
        flow = ad.add(prev_flow, flow)
    return feat, flow


def context_refine(stack: DilatedConvStack, feat: Tensor, flow: Tensor) -> Tensor:
    if feat.shape[2:] != flow.shape[2:] or flow.shape[1] != 2:
        raise ValueError(f"context_refine: feat {feat.shape} and flow {flow.shape} disagree")
    return ad.add(flow, stack(ad.concat_channels([feat, flow])))


class FlowDecoder(Module):
    def __init__(self, motion_channels, level_channels, widths=(96, 64, 32), context_widths=(32, 32, 32, 24, 16, 8, 2),
                 context_dilations=CONTEXT_DILATIONS, variant=PCLNET, *, rng, dtype=np.float64, flow_gain=0.1):
        self.variant = variant
        coupled = variant == PCLNETC
        feat_c = widths[-1]
        # blocks consume pyramid levels 4, 3, 2, 1 and then none
        self.blocks = []
        for k in range(5):
            cin = 0
            if k < 4:
                cin += motion_channels
                if coupled:
                    cin += level_channels[3 - k]
            if k > 0:
                cin += feat_c + 2
            self.blocks.append(OFEBlock(cin, widths, rng=rng, dtype=dtype, flow_gain=flow_gain, coupled=coupled))
        self.context = DilatedConvStack(feat_c + 2, context_widths, context_dilations, rng=rng, dtype=dtype)
        self.context.layers[-1].weight.data *= flow_gain

    def __call__(self, motion: MotionFeatures) -> list[FlowPyramid]:
        return decode_flows(motion, self)


def decode_flows(motion: MotionFeatures, dec: FlowDecoder) -> list[FlowPyramid]:
    """Decode every timestep; timesteps are folded into the batch axis."""
    steps = motion.timesteps
    n = None
    dense, couple = [], []
    for level in (4, 3, 2, 1):
        try:
            feats = [motion[(level, t)] for t in steps]
        except KeyError as exc:
            raise ValueError(f"missing motion feature for level {level}") from exc
        n = feats[0].dense.shape[0]
        dense.append(ad.concat([f.dense for f in feats], axis=0))
        couple.append(ad.concat([f.refined for f in feats], axis=0) if dec.variant == PCLNETC else None)

    flows = []
    feat = flow = None
    for k, block in enumerate(dec.blocks):
        up_feat = ad.upsample2x_bilinear(feat) if feat is not None else None
        up_flow = upsample_flow(flow) if flow is not None else None
        m = dense[k] if k < 4 else None
        cf = couple[k] if k < 4 else None
        feat, flow = ofe_block(block, m, up_feat, up_flow, cf)
        if k == 4:
            flow = context_refine(dec.context, feat, flow)
        flows.append(flow)
    batched = FlowPyramid(flows, upsample_flow(flow))
    return [batched.narrow(k * n, (k + 1) * n) for k in range(len(steps))]
