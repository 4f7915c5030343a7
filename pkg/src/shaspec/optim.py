"""Parameter updates: SGD with Nesterov momentum, AdamW, cosine schedule.

Parameters whose ``grad`` is ``None`` are skipped entirely — a branch that
never executed leaves its parameters (and their momentum buffers)
bit-identical, which is what the missing-modality omission rule requires.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

SGD_NESTEROV = "sgd_nesterov"
ADAM = "adam"


@dataclass
class OptimizerState:
    kind: str
    momentum: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    # per-parameter buffers, keyed by parameter name
    buffers: dict = field(default_factory=dict)


def make_optimizer(kind, momentum=0.99, beta1=0.9, beta2=0.999, epsilon=1e-8,
                   weight_decay=None):
    """Fresh optimizer state; Adam defaults to decoupled weight decay 1e-2."""
    if kind not in (SGD_NESTEROV, ADAM):
        raise ValidationError(f"unknown optimizer kind {kind!r}")
    if weight_decay is None:
        weight_decay = 0.01 if kind == ADAM else 0.0
    if weight_decay < 0:
        raise ValidationError("weight_decay must be >= 0")
    return OptimizerState(kind=kind, momentum=momentum, beta1=beta1, beta2=beta2,
                          epsilon=epsilon, weight_decay=weight_decay)


def optimizer_step(params, state, lr):
    """Apply one in-place update to every parameter that has a gradient.

    `params` is a sequence of (name, Tensor) pairs; buffers are allocated
    lazily per name and always match their parameter's shape.
    """
    if lr <= 0:
        raise ValidationError(f"learning rate must be > 0, got {lr}")
    state.step_count += 1
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        if state.kind == SGD_NESTEROV:
            mu = state.momentum
            if state.weight_decay:
                g = g + state.weight_decay * p.data
            v = state.buffers.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = mu * v + g
            state.buffers[name] = v
            p.data -= lr * (g + mu * v)
        else:  # adam with decoupled weight decay
            buf = state.buffers.get(name)
            if buf is None:
                buf = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
                state.buffers[name] = buf
            buf["t"] += 1
            t = buf["t"]
            buf["m"] = state.beta1 * buf["m"] + (1.0 - state.beta1) * g
            buf["v"] = state.beta2 * buf["v"] + (1.0 - state.beta2) * g * g
            m_hat = buf["m"] / (1.0 - state.beta1 ** t)
            v_hat = buf["v"] / (1.0 - state.beta2 ** t)
            update = m_hat / (np.sqrt(v_hat) + state.epsilon)
            if state.weight_decay:
                update = update + state.weight_decay * p.data
            p.data -= lr * update


def cosine_lr(step, total_steps, lr0):
    """Half-cosine decay from lr0 at step 0 down to 0 at total_steps."""
    if lr0 <= 0:
        raise ValidationError(f"lr0 must be > 0, got {lr0}")
    if total_steps <= 0:
        raise ValidationError(f"total_steps must be > 0, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
