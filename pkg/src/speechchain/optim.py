"""Gradient-descent optimizers with global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ModelParameters


class MissingGradientError(RuntimeError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__("no gradient for parameter(s): " + ", ".join(self.names))


@dataclass
class OptimizerState:
    """Per-parameter buffers plus the step counter and hyperparameters."""

    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    step: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def global_norm(grads) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def optimizer_step(params: ModelParameters, state: OptimizerState,
                   allow_missing: bool = False) -> float:
    """Apply one update in place, clear gradients, return the pre-clip norm.

    With ``allow_missing`` a parameter without a gradient is treated as
    having a zero gradient; otherwise it is an error.
    """
    missing = [name for name, t in params.items() if t.grad is None]
    if missing and not allow_missing:
        raise MissingGradientError(missing)
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for name, t in params.items()}
    norm = global_norm(grads.values())
    scale = 1.0
    if state.clip_norm is not None and norm > state.clip_norm:
        scale = state.clip_norm / (norm + 1e-12)
    state.step += 1
    for name, t in params.items():
        g = grads[name] * scale if scale != 1.0 else grads[name]
        if state.kind == "sgd":
            if state.momentum:
                buf = state.buffers.get(name)
                buf = g.copy() if buf is None else state.momentum * buf + g
                state.buffers[name] = buf
                g = buf
            t.data = t.data - state.lr * g
        else:
            m, v = state.buffers.get(name, (None, None))
            if m is None:
                m = np.zeros_like(t.data)
                v = np.zeros_like(t.data)
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            state.buffers[name] = (m, v)
            mhat = m / (1.0 - state.beta1 ** state.step)
            vhat = v / (1.0 - state.beta2 ** state.step)
            t.data = t.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    params.zero_grad()
    return norm
