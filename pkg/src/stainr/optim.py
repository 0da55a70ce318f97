"""AdamW with decoupled weight decay, and the cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, NumericError


class OptimState:
    """First/second moments per parameter name, plus the step counter."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step = 0
        self.m = {}
        self.v = {}

    def named_tensors(self):
        """Moment arrays in insertion order, for checkpointing."""
        for name, arr in self.m.items():
            yield "optim.m." + name, arr
        for name, arr in self.v.items():
            yield "optim.v." + name, arr


def adamw_step(named_params, state: OptimState, lr: float):
    """One decoupled-weight-decay update over (name, Tensor) pairs.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in named_params:
        g = p.grad
        if g is None:
            raise NumericError(f"adamw_step: parameter {name} has no gradient")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                                + state.weight_decay * p.data)


def cosine_anneal_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from lr_max (step 0) to lr_min (step == total).

    Written as a convex combination so both endpoints are reproduced
    exactly: cos(0)=1 gives lr_max, cos(pi)=-1 gives lr_min.
    """
    if total <= 0:
        raise ConfigError(f"cosine schedule needs total > 0, got {total}")
    if not 0 <= step <= total:
        raise ConfigError(f"schedule step {step} outside [0, {total}]")
    c = 0.5 * (1.0 + math.cos(math.pi * step / total))
    return lr_min * (1.0 - c) + lr_max * c
