"""Adam with bias correction, cosine-annealed learning rate, early stopping."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Standard bias-corrected Adam; betas default to (0.9, 0.99)."""

    def __init__(self, params: list[Tensor], lr: float = 0.0025,
                 betas: tuple[float, float] = (0.9, 0.99), eps: float = 1e-8):
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - update.astype(p.data.dtype)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "lr": self.lr,
                "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


def cosine_lr(epoch: int, base_lr: float = 0.0025, period: int = 20,
              min_lr: float = 1e-8) -> float:
    """Cosine annealing restarting every ``period`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    frac = (epoch % period) / period
    return min_lr + (base_lr - min_lr) * (1.0 + np.cos(np.pi * frac)) / 2.0


def early_stop(history: list[float], patience: int, min_delta: float):
    """Index at which training would stop (no improvement > min_delta for
    ``patience`` consecutive epochs), or None if it never stops."""
    if not history:
        return None
    best = history[0]
    streak = 0
    for e, loss in enumerate(history[1:], start=1):
        if loss < best - min_delta:
            best = loss
            streak = 0
        else:
            streak += 1
        if streak >= patience:
            return e
    return None


class EarlyStopper:
    """Streaming form of :func:`early_stop` that snapshots the best state."""

    def __init__(self, patience: int = 10, min_delta: float = 1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.best_state = None
        self.streak = 0

    def update(self, loss: float, state: dict | None = None) -> bool:
        """Record an epoch result; returns True when training should stop."""
        if loss < self.best - self.min_delta:
            self.best = loss
            self.streak = 0
            if state is not None:
                self.best_state = state
        else:
            self.streak += 1
        return self.streak >= self.patience
