"""AdamW with decoupled weight decay, global-norm clipping, warmup/cosine schedule."""

from __future__ import annotations

import math

import numpy as np


class NonFiniteGradient(ValueError):
    """A gradient contained NaN or inf; the step is rejected."""


class AdamW:
    """Bias-corrected adaptive update; weight decay applied directly to params.

    `params` is a dict name -> Tensor. Moments share the parameter shapes.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        for name in self.params:
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for parameter '{name}'")
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / (1.0 - b1 ** t)
            vhat = v / (1.0 - b2 ** t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data


def clip_global_norm(grads, max_norm=1.0):
    """Scale the whole gradient map so its global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def lr_schedule(step, total, base_lr, warmup):
    """Linear ramp 0 -> base_lr over `warmup` steps, then cosine decay to 0."""
    if not (0 <= step <= total):
        raise ValueError(f"lr_schedule: step {step} outside [0, {total}]")
    if not (0 <= warmup < total):
        raise ValueError(f"lr_schedule: warmup {warmup} outside [0, {total})")
    if step < warmup:
        return base_lr * step / warmup
    frac = (step - warmup) / (total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
