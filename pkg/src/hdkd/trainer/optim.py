"""Adam and decoupled-weight-decay AdamW."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    skipped: int = 0

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def init_optimizer(params, kind: str = "adam", lr: float = 1e-3, weight_decay: float = 0.0,
                   betas=(0.9, 0.999), eps: float = 1e-8) -> OptimizerState:
    state = OptimizerState(kind, lr, tuple(betas), eps, weight_decay)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def optimizer_step(state: OptimizerState, params, grads=None) -> bool:
    """Apply one update in place.  Returns False (and changes nothing) on a non-finite gradient.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient counts as zero.
    """
    grads = [p.grad for p in params] if grads is None else list(grads)
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            return False
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr = state.lr
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.kind == "adamw":
            if state.weight_decay:
                p.data -= lr * state.weight_decay * p.data
        elif state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True
