"""Full network: backbone -> motion concentration -> flow decoder."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .backbone import Backbone, extract_clip_pyramids
from .config import ModelConfig
from .decoder import FlowDecoder, FlowPyramid, decode_flows
from .motion import MotionConcentration, MotionFeatures, concentrate
from .nn import Module


class PCLNet(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float64):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(cfg.backbone_channels, rng=rng, dtype=dtype, mean=cfg.input_mean, std=cfg.input_std)
        self.motion = MotionConcentration(cfg.backbone_channels, cfg.motion_channels, cfg.lstm_kernel, cfg.spp_bins,
                                          rng=rng, dtype=dtype, forget_bias=cfg.forget_bias)
        self.decoder = FlowDecoder(self.motion.dense_channels, cfg.backbone_channels, cfg.ofe_widths,
                                   cfg.context_widths, cfg.context_dilations, cfg.variant,
                                   rng=rng, dtype=dtype, flow_gain=cfg.flow_init_gain)

    @property
    def dtype(self):
        return self.backbone.stem.weight.dtype

    def features(self, frames: Sequence[Tensor]) -> MotionFeatures:
        return concentrate(extract_clip_pyramids(frames, self.backbone), self.motion)

    def __call__(self, frames: Sequence[Tensor]) -> list[FlowPyramid]:
        """Flow pyramids for each adjacent frame pair of the clip."""
        return decode_flows(self.features(frames), self.decoder)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()


def clip_frames(batch: np.ndarray, dtype) -> list[Tensor]:
    """Split an N x l x 3 x H x W array into per-timestep tensors."""
    batch = np.asarray(batch, dtype=dtype)
    return [Tensor(np.ascontiguousarray(batch[:, t])) for t in range(batch.shape[1])]
