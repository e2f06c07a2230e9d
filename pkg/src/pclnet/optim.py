"""Optimisers and learning-rate schedules."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = dict(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict, step: int) -> None:
        for k in self.params:
            self.m[k] = np.array(tensors[f"adam_m/{k}"], dtype=self.params[k].dtype)
            self.v[k] = np.array(tensors[f"adam_v/{k}"], dtype=self.params[k].dtype)
        self.t = step


class Momentum:
    def __init__(self, named_params, lr=1e-3, momentum=0.9, weight_decay=0.0):
        self.params = dict(named_params)
        self.lr = lr
        self.mu = momentum
        self.weight_decay = weight_decay
        self.t = 0
        self.buf = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            b = self.buf[k]
            b *= self.mu
            b += g
            p.data = p.data - self.lr * b

    def state(self) -> dict:
        return {f"momentum/{k}": v for k, v in self.buf.items()}

    def load_state(self, tensors: dict, step: int) -> None:
        for k in self.params:
            self.buf[k] = np.array(tensors[f"momentum/{k}"], dtype=self.params[k].dtype)
        self.t = step


class StepDecay:
    """Multiply the rate by ``factor`` each time the iteration reaches a milestone."""

    def __init__(self, base_lr, milestones, factor):
        ms = list(milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing: {ms}")
        if not 0 < factor < 1:
            raise ValueError(f"decay factor must lie in (0, 1), got {factor}")
        self.base_lr = base_lr
        self.milestones = ms
        self.factor = factor
        self.iteration = 0

    @property
    def lr(self) -> float:
        passed = sum(1 for m in self.milestones if self.iteration >= m)
        return self.base_lr * self.factor**passed

    def step(self, loss: float | None = None) -> float:
        self.iteration += 1
        return self.lr

    def state(self) -> dict:
        return {"iteration": self.iteration}

    def load_state(self, st: dict) -> None:
        self.iteration = st["iteration"]


class PlateauDecay:
    """Decay when the loss averaged over ``window`` iterations stalls.

    A window counts as an improvement when its mean beats the best window mean
    so far by more than ``threshold``; ``patience`` consecutive non-improving
    windows trigger one decay and reset the count.
    """

    def __init__(self, base_lr, factor=0.1, patience=3, window=100, threshold=1e-4, min_lr=0.0):
        if not 0 < factor < 1:
            raise ValueError(f"decay factor must lie in (0, 1), got {factor}")
        self.lr = base_lr
        self.factor = factor
        self.patience = patience
        self.window = window
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = np.inf
        self.bad = 0
        self.acc = 0.0
        self.count = 0
        self.iteration = 0

    def step(self, loss: float) -> float:
        self.iteration += 1
        self.acc += loss
        self.count += 1
        if self.count == self.window:
            avg = self.acc / self.count
            self.acc, self.count = 0.0, 0
            if avg < self.best - self.threshold:
                self.best = avg
                self.bad = 0
            else:
                self.bad += 1
                if self.bad >= self.patience:
                    self.lr = max(self.lr * self.factor, self.min_lr)
                    self.bad = 0
        return self.lr

    def state(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "best", "bad", "acc", "count", "iteration")}

    def load_state(self, st: dict) -> None:
        for k, v in st.items():
            setattr(self, k, v)
