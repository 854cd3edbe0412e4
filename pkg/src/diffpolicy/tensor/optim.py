from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DimensionError, Parameter


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[Parameter], state: AdamState) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        if p.grad.shape != p.shape:
            raise DimensionError(f"{p.name}: gradient {p.grad.shape} vs value {p.shape}")
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EmaState:
    decay: float = 0.999
    shadow: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_params(cls, params: list[Parameter], decay: float = 0.999) -> "EmaState":
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
        return cls(decay, {p.name: p.data.copy() for p in params})


def ema_update(params: list[Parameter], state: EmaState) -> None:
    """shadow <- decay * shadow + (1 - decay) * value."""
    d = state.decay
    for p in params:
        s = state.shadow.get(p.name)
        if s is None or s.shape != p.shape:
            raise DimensionError(f"{p.name}: EMA shadow missing or misshapen")
        state.shadow[p.name] = d * s + (1.0 - d) * p.data
