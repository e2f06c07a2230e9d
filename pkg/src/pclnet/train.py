"""Training, evaluation, inference and benchmarking."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PCLNET, PCLNETC, SUPERVISED, Config
from .dataio.augment import augment_clip
from .dataio.colorcode import flow_to_color
from .dataio.formats import write_flo, write_ppm
from .dataio.synthetic import Clip
from .losses import downsample_flow, epe_map, multiscale_epe_loss, reconstruction_loss
from .model import PCLNet
from .optim import Adam, Momentum, PlateauDecay, StepDecay

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss became {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


def stack_clips(clips: Sequence[Clip], dtype):
    """Batch clips into per-timestep frame tensors and (optionally) flow tensors."""
    frames = np.stack([c.frames for c in clips]).astype(dtype)
    out_frames = [Tensor(np.ascontiguousarray(frames[:, t])) for t in range(frames.shape[1])]
    flows = None
    if all(c.gt_flows is not None for c in clips):
        fl = np.stack([c.gt_flows for c in clips]).astype(dtype)
        flows = [Tensor(np.ascontiguousarray(fl[:, t])) for t in range(fl.shape[1])]
    return out_frames, flows


def clip_loss(model: PCLNet, cfg: Config, frames, flows) -> Tensor:
    pyramids = model(frames)
    if cfg.train.mode == SUPERVISED:
        if flows is None:
            raise ValueError("supervised training needs ground-truth flows")
        return multiscale_epe_loss(pyramids, flows, cfg.loss.scale_weights)
    return reconstruction_loss(frames, pyramids, cfg.loss)


class Trainer:
    """Owns the model, optimiser and schedule for one training run."""

    def __init__(self, cfg: Config, clips: Sequence[Clip], val_clips: Sequence[Clip] = ()):
        self.cfg = cfg
        tc = cfg.train
        self.clips = list(clips)
        self.val_clips = list(val_clips)
        if not self.clips:
            raise ValueError("training set is empty")
        if tc.mode == SUPERVISED and any(c.gt_flows is None for c in self.clips):
            raise ValueError("supervised training needs ground-truth flows for every clip")
        self.dtype = tc.dtype
        self.model = PCLNet(cfg.model, seed=tc.seed, dtype=self.dtype)
        params = list(self.model.named_parameters())
        if tc.optimizer == "adam":
            self.optimizer = Adam(params, tc.lr, weight_decay=tc.weight_decay)
        elif tc.optimizer == "momentum":
            self.optimizer = Momentum(params, tc.lr, tc.momentum, tc.weight_decay)
        else:
            raise ValueError(f"unknown optimizer {tc.optimizer!r}")
        if tc.schedule == "step":
            self.schedule = StepDecay(tc.lr, tc.milestones, tc.decay_factor)
        elif tc.schedule == "plateau":
            self.schedule = PlateauDecay(tc.lr, tc.decay_factor, tc.plateau_patience, tc.plateau_window,
                                         tc.plateau_threshold)
        else:
            raise ValueError(f"unknown schedule {tc.schedule!r}")
        self.iteration = 0
        self.history: list[dict] = []

    def batch(self, iteration: int) -> list[Clip]:
        """Clips for ``iteration``; a pure function of (seed, iteration)."""
        tc = self.cfg.train
        rng = np.random.default_rng([tc.seed, iteration])
        k = min(tc.batch_size, len(self.clips))
        idx = rng.choice(len(self.clips), size=k, replace=False)
        chosen = [self.clips[i] for i in sorted(idx)]
        if tc.augment:
            crop = tuple(tc.frame_size) if "crop" in tc.augment else None
            chosen = [augment_clip(c, tc.augment, seed=int(rng.integers(2**31)), crop_size=crop) for c in chosen]
        return chosen

    def step(self) -> float:
        frames, flows = stack_clips(self.batch(self.iteration), self.dtype)
        with ad.use_tape() as tape:
            loss = clip_loss(self.model, self.cfg, frames, flows)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(self.iteration, value)
            ad.backward(loss, tape)
        self.optimizer.lr = self.schedule.lr
        self.optimizer.step()
        lr = self.optimizer.lr
        self.schedule.step(value)
        self.iteration += 1
        self.history.append({"iteration": self.iteration, "loss": value, "lr": lr})
        return value

    def validate(self) -> float:
        report = evaluate(self.model, self.val_clips, name="val")
        self.history[-1]["val_epe"] = report.mean_epe if self.history else None
        return report.mean_epe

    def run(self, iterations: int | None = None, checkpoint_dir=None,
            callback: Callable[["Trainer"], bool] | None = None) -> list[dict]:
        """Train up to ``iterations`` more steps (default: to ``max_iterations``).

        ``callback`` runs after each validation; returning True stops early.
        """
        tc = self.cfg.train
        end = tc.max_iterations if iterations is None else self.iteration + iterations
        while self.iteration < end:
            loss = self.step()
            if self.iteration % 50 == 0:
                log.info("iter %d loss %.5f lr %.2e", self.iteration, loss, self.optimizer.lr)
            if self.val_clips and tc.validate_interval and self.iteration % tc.validate_interval == 0:
                epe = self.validate()
                log.info("iter %d validation EPE %.4f", self.iteration, epe)
                if callback is not None and callback(self):
                    break
            if checkpoint_dir is not None and tc.checkpoint_interval and self.iteration % tc.checkpoint_interval == 0:
                self.save(Path(checkpoint_dir) / f"ckpt_{self.iteration:06d}.pclc")
        return self.history

    # -- checkpoints ---------------------------------------------------------

    def save(self, path) -> None:
        tensors = {f"param/{k}": v for k, v in self.model.state_dict().items()}
        tensors.update(self.optimizer.state())
        meta = {
            "config": self.cfg.to_dict(),
            "iteration": self.iteration,
            "optimizer_step": self.optimizer.t,
            "lr": self.optimizer.lr,
            "schedule": self.schedule.state(),
        }
        save_checkpoint(path, tensors, meta, self.cfg.model_hash())

    def restore(self, path, allow_mismatch: bool = False) -> None:
        tensors, meta, _ = load_checkpoint(path, self.cfg.model_hash(), allow_mismatch)
        self.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
        self.optimizer.load_state(tensors, meta["optimizer_step"])
        self.optimizer.lr = meta["lr"]
        self.schedule.load_state(meta["schedule"])
        self.iteration = meta["iteration"]


def load_model(path, cfg: Config | None = None, allow_mismatch: bool = False) -> tuple[PCLNet, Config]:
    """Rebuild a model from a checkpoint, using its stored config unless one is given."""
    tensors, meta, _ = load_checkpoint(path)
    stored = Config.from_dict(meta["config"])
    if cfg is not None and cfg.model_hash() != stored.model_hash() and not allow_mismatch:
        raise ValueError(f"{path}: checkpoint was trained with a different model configuration")
    cfg = cfg or stored
    state = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    dtype = next(iter(state.values())).dtype
    model = PCLNet(cfg.model, seed=cfg.train.seed, dtype=dtype)
    model.load_state_dict(state)
    return model, cfg


# -- evaluation ----------------------------------------------------------------


@dataclass
class EvalReport:
    dataset: str
    clip_epe: list = field(default_factory=list)
    scale_epe: dict = field(default_factory=dict)
    seconds: list = field(default_factory=list)

    @property
    def clips(self) -> int:
        return len(self.clip_epe)

    @property
    def mean_epe(self) -> float:
        return float(np.mean(self.clip_epe)) if self.clip_epe else float("nan")

    @property
    def median_epe(self) -> float:
        return float(np.median(self.clip_epe)) if self.clip_epe else float("nan")

    @property
    def sec_per_clip(self) -> float:
        return float(np.mean(self.seconds)) if self.seconds else float("nan")

    HEADER = ("dataset", "clips", "mean_epe", "median_epe", "sec_per_clip")

    def row(self) -> tuple:
        return (self.dataset, self.clips, f"{self.mean_epe:.6f}", f"{self.median_epe:.6f}", f"{self.sec_per_clip:.6f}")

    def text(self) -> str:
        lines = [f"{self.dataset}: {self.clips} clips, mean EPE {self.mean_epe:.4f}, "
                 f"median EPE {self.median_epe:.4f}, {self.sec_per_clip:.4f} s/clip"]
        for s, v in sorted(self.scale_epe.items(), reverse=True):
            lines.append(f"  stride {s:>2}: EPE {v:.4f}")
        return "\n".join(lines)


def predict(model: PCLNet, clip: Clip):
    frames, _ = stack_clips([clip], model.dtype)
    with ad.no_grad():
        return model(frames)


def evaluate(model: PCLNet, clips: Sequence[Clip], name: str = "eval") -> EvalReport:
    """Full-resolution EPE per clip (mean over its flows) and per-scale EPE."""
    report = EvalReport(name)
    per_scale: dict[int, list] = {}
    for clip in clips:
        if clip.gt_flows is None:
            raise ValueError(f"clip {clip.source!r} has no ground-truth flow")
        t0 = time.perf_counter()
        pyramids = predict(model, clip)
        report.seconds.append(time.perf_counter() - t0)
        errs = []
        for t, pyr in enumerate(pyramids):
            gt = Tensor(clip.gt_flows[t][None].astype(model.dtype))
            errs.append(float(epe_map(pyr.final.data, gt.data).mean()))
            for s, f in zip(pyr.all_strides, pyr.all_fields):
                with ad.no_grad():
                    ref = downsample_flow(gt, s).data
                per_scale.setdefault(s, []).append(float(epe_map(f.data, ref).mean()))
        report.clip_epe.append(float(np.mean(errs)))
    report.scale_epe = {s: float(np.mean(v)) for s, v in per_scale.items()}
    return report


# -- inference -----------------------------------------------------------------


def center_crop32(clip: Clip) -> Clip:
    h, w = clip.extent
    ch, cw = (h // 32) * 32, (w // 32) * 32
    if (ch, cw) == (h, w):
        return clip
    if ch == 0 or cw == 0:
        raise ValueError(f"clip {clip.source!r} is smaller than 32x32")
    log.warning("clip %s: %dx%d not divisible by 32, centre-cropping to %dx%d", clip.source, h, w, ch, cw)
    y0, x0 = (h - ch) // 2, (w - cw) // 2
    flows = None if clip.gt_flows is None else clip.gt_flows[:, :, y0 : y0 + ch, x0 : x0 + cw]
    return Clip(clip.frames[:, :, y0 : y0 + ch, x0 : x0 + cw], flows, clip.source)


def infer(model: PCLNet, clips, out_dir) -> tuple[list[Path], int]:
    """Write ``<clip>_<t>.flo`` and a colour-coded ``<clip>_<t>.ppm`` per flow.

    Returns the written .flo paths and the number of failures; a failing clip
    is logged and skipped.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written, failures = [], 0
    for clip in clips:
        try:
            clip = center_crop32(clip)
            pyramids = predict(model, clip)
            width = max(2, len(str(len(pyramids))))
            for t, pyr in enumerate(pyramids, start=1):
                flow = pyr.final.data[0].astype(np.float32)
                stem = f"{clip.source}_{t:0{width}d}"
                write_flo(out / f"{stem}.flo", flow)
                write_ppm(out / f"{stem}.ppm", flow_to_color(flow))
                written.append(out / f"{stem}.flo")
        except (OSError, ValueError) as exc:
            log.error("inference failed for %s: %s", clip.source, exc)
            failures += 1
    return written, failures


# -- benchmark -----------------------------------------------------------------


@dataclass
class TimingReport:
    variant: str
    parameters: int
    times: list

    @property
    def median(self) -> float:
        return float(np.median(self.times))

    @property
    def p10(self) -> float:
        return float(np.percentile(self.times, 10))

    @property
    def p90(self) -> float:
        return float(np.percentile(self.times, 90))

    HEADER = ("variant", "parameters", "runs", "median_s", "p10_s", "p90_s")

    def row(self) -> tuple:
        return (self.variant, self.parameters, len(self.times), f"{self.median:.6f}", f"{self.p10:.6f}", f"{self.p90:.6f}")


def benchmark(cfg: Config, runs: int = 50, warmup: int = 3, size=None, length: int | None = None,
              seed: int = 0) -> dict[str, TimingReport]:
    """Median single-clip forward time for both variants at identical widths.

    Runs are interleaved so that slow drifts in machine load hit both equally.
    """
    h, w = size or cfg.train.frame_size
    length = length or cfg.train.clip_length
    dtype = cfg.train.dtype
    rng = np.random.default_rng(seed)
    frames = [Tensor(rng.uniform(size=(1, 3, h, w)).astype(dtype)) for _ in range(length)]
    models = {}
    for variant in (PCLNET, PCLNETC):
        mc = Config.from_dict(cfg.to_dict()).model
        mc.variant = variant
        models[variant] = PCLNet(mc, seed=seed, dtype=dtype)
    times = {v: [] for v in models}
    with ad.no_grad():
        for _ in range(warmup):
            for m in models.values():
                m(frames)
        for _ in range(runs):
            for v, m in models.items():
                t0 = time.perf_counter()
                m(frames)
                times[v].append(time.perf_counter() - t0)
    return {v: TimingReport(v, models[v].num_parameters(), times[v]) for v in models}
