"""AdamW, learning-rate schedules and global-norm gradient clipping."""

from __future__ import annotations

import math

import numpy as np


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Parameters are held as float32 arrays keyed by name and updated in place
    by ``step``; moments are float32 too.
    """

    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            g = g.astype(p.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_dict(self) -> dict:
        out = {"t": np.array(self.t)}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.array(state[f"m/{k}"], dtype=self.params[k].dtype)
            self.v[k] = np.array(state[f"v/{k}"], dtype=self.params[k].dtype)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grad_norm(grads: dict, max_norm: float | None):
    """Scale gradients so their global L2 norm is at most ``max_norm``.

    Returns ``(grads, norm_before)``.
    """
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / (norm + 1e-6)
    return {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}, norm


def lr_at(step: int, total: int, peak: float, schedule: str = "constant", warmup_ratio: float = 0.0) -> float:
    """Learning rate for 0-based ``step`` out of ``total`` steps."""
    warmup = int(math.ceil(warmup_ratio * total))
    if warmup and step < warmup:
        return peak * (step + 1) / warmup
    if schedule == "constant":
        return peak
    if schedule == "cosine":
        span = max(total - warmup, 1)
        progress = min(max(step - warmup, 0) / span, 1.0)
        return 0.5 * peak * (1.0 + math.cos(math.pi * progress))
    raise ValueError(f"unknown schedule {schedule!r}")
