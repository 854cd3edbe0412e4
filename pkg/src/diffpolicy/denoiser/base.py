"""The denoiser contract and the preconditioning wrapper.

Any object with ``denoise(a, state, goal, sigma) -> ndarray`` and a
``supports_unconditional`` flag is a denoiser. ``goal=None`` requests the
goal-masked (unconditional) evaluation. ``sigma`` is a scalar or one value
per batch row.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np

from ..tensor import Tensor, no_grad


class Denoiser(Protocol):
    supports_unconditional: bool

    def denoise(self, a, state, goal, sigma) -> np.ndarray: ...


class GuidanceError(ValueError):
    """Unconditional evaluation requested from a model trained without goal dropout."""


def sigma_column(sigma, a) -> np.ndarray:
    """Reshape scalar or per-row sigma so it broadcasts against ``a``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    a = np.asarray(a)
    if sigma.ndim == 0:
        return sigma.reshape((1,) * max(a.ndim, 1))
    return sigma.reshape((-1,) + (1,) * (a.ndim - 1))


def score_from_denoiser(d_value, a, sigma) -> np.ndarray:
    """grad log p_sigma(a) = (D(a, sigma) - a) / sigma^2."""
    sig = sigma_column(sigma, a)
    if np.any(sig <= 0):
        raise ValueError("score is undefined at sigma = 0")
    return (np.asarray(d_value) - np.asarray(a)) / sig ** 2


class Preconditioning:
    """Input/output scalings that keep the inner network unit-scale across noise levels."""

    def __init__(self, sigma_data: float = 0.5):
        self.sigma_data = float(sigma_data)

    def c_skip(self, sigma):
        sd2 = self.sigma_data ** 2
        return sd2 / (sd2 + np.asarray(sigma) ** 2)

    def c_out(self, sigma):
        sigma = np.asarray(sigma)
        return sigma * self.sigma_data / np.sqrt(self.sigma_data ** 2 + sigma ** 2)

    def c_in(self, sigma):
        return 1.0 / np.sqrt(self.sigma_data ** 2 + np.asarray(sigma) ** 2)

    def c_noise(self, sigma):
        return 0.25 * np.log(np.asarray(sigma))

    def loss_weight(self, sigma):
        """(sigma^2 + sigma_data^2) / (sigma * sigma_data)^2, i.e. 1 / c_out^2."""
        sigma = np.asarray(sigma)
        return (sigma ** 2 + self.sigma_data ** 2) / (sigma * self.sigma_data) ** 2


class PreconditionedDenoiser:
    """D(a, s, g, sigma) = c_skip a + c_out F(c_in a, s, g, c_noise).

    ``inner`` is called as ``inner(a_in, state, goal, c_noise, goal_mask, rng)``
    and returns a ``Tensor`` shaped like ``a``.
    """

    def __init__(self, inner, sigma_data: float = 0.5, supports_unconditional: bool = False):
        self.inner = inner
        self.pre = Preconditioning(sigma_data)
        self.supports_unconditional = supports_unconditional

    @property
    def sigma_data(self) -> float:
        return self.pre.sigma_data

    def forward(self, a, state, goal, sigma, goal_mask=None, rng=None) -> Tensor:
        a = np.asarray(a, dtype=np.float64)
        sig = sigma_column(sigma, a)
        if np.any(sig <= 0):
            raise ValueError("preconditioned denoiser needs sigma > 0")
        c_noise = np.broadcast_to(self.pre.c_noise(np.asarray(sigma, dtype=np.float64)).reshape(-1), (a.shape[0],))
        f = self.inner(self.pre.c_in(sig) * a, state, goal, c_noise, goal_mask, rng)
        return self.pre.c_skip(sig) * a + f * self.pre.c_out(sig)

    def denoise(self, a, state, goal, sigma) -> np.ndarray:
        if goal is None and not self.supports_unconditional:
            raise GuidanceError("model was trained without goal dropout; no unconditional branch")
        was_training = getattr(self.inner, "training", False)
        if hasattr(self.inner, "eval"):
            self.inner.eval()
        try:
            with no_grad():
                mask = None if goal is not None else np.ones(len(a), dtype=bool)
                return self.forward(a, state, goal, sigma, mask).data
        finally:
            if was_training:
                self.inner.train()


def precondition_wrap(inner, sigma_data: float = 0.5, supports_unconditional: bool = False) -> PreconditionedDenoiser:
    return PreconditionedDenoiser(inner, sigma_data, supports_unconditional)


def denoiser_forward(model, a, state, goal, sigma, goal_mask=None, rng=None) -> Tensor:
    """Differentiable evaluation when the model has one, constant otherwise."""
    if hasattr(model, "forward"):
        return model.forward(a, state, goal, sigma, goal_mask, rng)
    if goal_mask is None or not np.any(goal_mask):
        return Tensor(model.denoise(a, state, goal, sigma))
    if np.all(goal_mask):
        return Tensor(model.denoise(a, state, None, sigma))
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64).reshape(-1), (len(a),))
    out = np.asarray(model.denoise(a, state, goal, sigma), dtype=np.float64).copy()
    m = np.asarray(goal_mask, dtype=bool)
    sub_state = None if state is None else np.asarray(state)[m]
    out[m] = model.denoise(np.asarray(a)[m], sub_state, None, sig[m])
    return Tensor(out)

