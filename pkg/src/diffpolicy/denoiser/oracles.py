"""Closed-form denoisers for Gaussian and Gaussian-mixture data.

For data drawn from a mixture of isotropic Gaussians, the noised marginal
at level sigma is again a mixture with variances ``s_k**2 + sigma**2`` and
the exact denoiser is the posterior mean E[a0 | a]. These are the ground
truth used to test the samplers and the learned networks.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .base import sigma_column


@dataclass(frozen=True)
class GmmOracle:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    stds: np.ndarray  # (K,)

    supports_unconditional = True

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", np.atleast_2d(np.asarray(self.means, dtype=np.float64)))
        object.__setattr__(self, "stds", np.asarray(self.stds, dtype=np.float64).reshape(-1))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _log_resp(self, a, sigma):
        # a: (..., d); sigma broadcastable to a[..., :1]
        var = self.stds ** 2 + sigma ** 2  # (..., K)
        diff = a[..., None, :] - self.means  # (..., K, d)
        sq = (diff ** 2).sum(-1)
        d = self.dim
        logp = np.log(self.weights) - 0.5 * d * np.log(2 * np.pi * var) - 0.5 * sq / var
        return logp, var

    def log_density(self, a, sigma):
        """log p_sigma(a) of the noised mixture."""
        a = np.asarray(a, dtype=np.float64)
        logp, _ = self._log_resp(a, sigma_column(sigma, a))
        return logsumexp(logp, axis=-1)

    def _posterior(self, a, sigma):
        a = np.asarray(a, dtype=np.float64)
        sig = sigma_column(sigma, a)  # (B, 1, ..., 1) matching a
        logp, var = self._log_resp(a, sig)
        resp = np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))
        return a, sig, resp, var

    def denoise(self, a, state=None, goal=None, sigma=0.0):
        a, sig, resp, var = self._posterior(a, sigma)
        s2 = self.stds ** 2
        # per-component posterior mean (sigma^2 mu_k + s_k^2 a) / (s_k^2 + sigma^2)
        comp = (sig[..., None] ** 2 * self.means + s2[:, None] * a[..., None, :]) / var[..., None]
        return (resp[..., None] * comp).sum(-2)

    def score(self, a, sigma):
        """Closed-form grad_a log p_sigma(a)."""
        a, sig, resp, var = self._posterior(a, sigma)
        comp = (self.means - a[..., None, :]) / var[..., None]
        return (resp[..., None] * comp).sum(-2)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[k] + self.stds[k, None] * rng.standard_normal((n, self.dim))


def GaussianOracle(mean, std) -> GmmOracle:
    """Single-component special case: D = (sigma^2 mu + s^2 a) / (s^2 + sigma^2)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    return GmmOracle(np.ones(1), mean[None, :], np.array([float(std)]))


@dataclass(frozen=True)
class ConditionalGmmOracle:
    """Goal-selected mixtures; a masked goal yields the goal-marginal mixture.

    ``goal_codes[k]`` is the goal vector that selects ``mixtures[k]``; goals
    are matched to the nearest code. Actions are ``(B, d)`` or
    ``(B, 1, d)`` windows of length one.
    """

    goal_codes: np.ndarray  # (G, dg)
    mixtures: tuple[GmmOracle, ...]
    goal_prior: np.ndarray  # (G,)

    supports_unconditional = True

    @cached_property
    def marginal(self) -> GmmOracle:
        w = np.concatenate([p * m.weights for p, m in zip(self.goal_prior, self.mixtures)])
        return GmmOracle(w / w.sum(), np.concatenate([m.means for m in self.mixtures]),
                         np.concatenate([m.stds for m in self.mixtures]))

    def goal_index(self, goal) -> np.ndarray:
        g = np.asarray(goal, dtype=np.float64).reshape(len(goal), -1)
        codes = self.goal_codes.reshape(len(self.goal_codes), -1)
        return np.argmin(((g[:, None, :] - codes[None]) ** 2).sum(-1), axis=1)

    def denoise(self, a, state=None, goal=None, sigma=0.0):
        a = np.asarray(a, dtype=np.float64)
        if goal is None:
            return self.marginal.denoise(a, None, None, sigma)
        idx = self.goal_index(goal)
        out = np.empty_like(a)
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64).reshape(-1), (len(a),))
        for k, mix in enumerate(self.mixtures):
            sel = idx == k
            if np.any(sel):
                out[sel] = mix.denoise(a[sel], None, None, sig[sel])
        return out
