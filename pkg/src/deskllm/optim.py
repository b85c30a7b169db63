"""AdamW with decoupled weight decay, warmup+cosine schedule, global-norm clipping."""

from __future__ import annotations

import math

import numpy as np


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int, min_lr: float = 0.0) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to ``min_lr`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


class NonFiniteGradient(FloatingPointError):
    pass


class AdamW:
    """AdamW over a dict of named numpy arrays, updated in place.

    Moments live in the parameters' dtype. ``decay`` decides per name whether
    weight decay applies.
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        decay=None,
    ):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.decay = decay or (lambda name: True)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
                raise NonFiniteGradient(f"{bad} non-finite gradient entries in {name!r} at step {self.t + 1}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            dt = p.dtype.type
            m, v = self.m[name], self.v[name]
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            m_hat = m / dt(bc1)
            v_hat = v / dt(bc2)
            update = m_hat / (np.sqrt(v_hat) + dt(self.eps))
            if self.weight_decay and self.decay(name):
                update = update + dt(self.weight_decay) * p
            p -= dt(lr) * update

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
    norm = math.sqrt(total)
    if max_norm and max_norm > 0 and norm > max_norm:
        coef = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= g.dtype.type(coef)
    return norm
