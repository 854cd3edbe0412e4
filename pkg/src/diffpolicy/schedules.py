"""Noise-level grids, training noise distributions and the ancestral split.

The continuous noise map is the identity, sigma(t) = t, so the time grid
and the noise grid coincide and d sigma / dt = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

FAMILIES = ("exponential", "linear", "karras", "ve", "vp", "iddpm")


class ScheduleError(ValueError):
    pass


def sigma_of_t(t):
    return t


def sigma_dot(t):
    return np.ones_like(np.asarray(t, dtype=np.float64))


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly decreasing positive levels; the terminal level 0 is implicit."""

    levels: tuple[float, ...]
    family: str

    @property
    def n(self) -> int:
        return len(self.levels)

    @property
    def sigma_max(self) -> float:
        return self.levels[0]

    @property
    def sigma_min(self) -> float:
        return self.levels[-1]

    def with_terminal(self) -> np.ndarray:
        """Levels followed by the terminal 0, length ``n + 1``."""
        return np.append(np.asarray(self.levels), 0.0)


def _vp_sigma(t, beta_d=19.9, beta_min=0.1):
    return np.sqrt(np.expm1(0.5 * beta_d * t ** 2 + beta_min * t))


def _vp_t(sigma, beta_d=19.9, beta_min=0.1):
    # inverse of _vp_sigma: solve 0.5*beta_d*t^2 + beta_min*t = log1p(sigma^2)
    c = np.log1p(sigma ** 2)
    return (-beta_min + np.sqrt(beta_min ** 2 + 2.0 * beta_d * c)) / beta_d


def iddpm_sigmas(m: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    """Discrete cosine-schedule noise levels sqrt((1 - abar_j) / abar_j), j = 1..m, increasing."""
    def abar(j):
        return np.cos((j / m + s) / (1 + s) * math.pi / 2) ** 2

    j = np.arange(m + 1)
    betas = np.minimum(1.0 - abar(j[1:]) / abar(j[:-1]), max_beta)
    alphas_cumprod = np.cumprod(1.0 - betas)
    return np.sqrt((1.0 - alphas_cumprod) / alphas_cumprod)


def build_schedule(family: str, n: int, sigma_min: float, sigma_max: float,
                   rho: float = 7.0, beta_d: float = 19.9, beta_min: float = 0.1,
                   iddpm_m: int = 1000) -> NoiseSchedule:
    """Grid of ``n`` noise levels running from ``sigma_max`` down to ``sigma_min``."""
    if family not in FAMILIES:
        raise ScheduleError(f"unknown schedule family {family!r}; expected one of {FAMILIES}")
    if n < 1:
        raise ScheduleError(f"need at least one level, got n={n}")
    if not 0.0 < sigma_min < sigma_max:
        raise ScheduleError(f"need 0 < sigma_min < sigma_max, got [{sigma_min}, {sigma_max}]")
    if n == 1:
        return NoiseSchedule((float(sigma_max),), family)

    frac = np.arange(n) / (n - 1)
    if family in ("exponential", "ve"):
        levels = sigma_max * (sigma_min / sigma_max) ** frac
    elif family == "linear":
        levels = sigma_max + frac * (sigma_min - sigma_max)
    elif family == "karras":
        hi, lo = sigma_max ** (1.0 / rho), sigma_min ** (1.0 / rho)
        levels = (hi + frac * (lo - hi)) ** rho
    elif family == "vp":
        t_hi, t_lo = _vp_t(sigma_max, beta_d, beta_min), _vp_t(sigma_min, beta_d, beta_min)
        levels = _vp_sigma(t_hi + frac * (t_lo - t_hi), beta_d, beta_min)
    else:  # iddpm
        table = iddpm_sigmas(iddpm_m)
        log_table = np.log(table)
        idx = np.arange(len(table), dtype=np.float64)
        # fractional index of each endpoint, extrapolating linearly in log-sigma past the table ends
        def frac_index(sig):
            ls = math.log(sig)
            if ls <= log_table[0]:
                slope = log_table[1] - log_table[0]
                return (ls - log_table[0]) / slope
            if ls >= log_table[-1]:
                slope = log_table[-1] - log_table[-2]
                return len(table) - 1 + (ls - log_table[-1]) / slope
            return float(np.interp(ls, log_table, idx))

        i_hi, i_lo = frac_index(sigma_max), frac_index(sigma_min)
        # uniform subsampling of the discrete index range between the endpoints
        targets = i_hi + frac * (i_lo - i_hi)
        levels = np.exp(np.interp(targets, idx, log_table))
    levels = np.asarray(levels, dtype=np.float64)
    levels[0], levels[-1] = sigma_max, sigma_min
    if np.any(np.diff(levels) >= 0):
        raise ScheduleError(f"{family} grid is not strictly decreasing for n={n}")
    return NoiseSchedule(tuple(float(x) for x in levels), family)


# -- training noise -------------------------------------------------------

@dataclass(frozen=True)
class TrainNoiseDist:
    """Truncated log-logistic or log-normal law over sigma.

    log-logistic: ``alpha`` is the median, ``beta`` the shape, so the
    quantile function is alpha * (u / (1 - u)) ** (1 / beta).
    log-normal: ``mean`` and ``std`` describe ln(sigma).
    """

    family: str = "log-logistic"
    alpha: float = 0.5
    beta: float = 0.5
    mean: float = -1.2
    std: float = 1.2
    sigma_min: float = 0.005
    sigma_max: float = 1.0

    def __post_init__(self):
        if self.family not in ("log-logistic", "log-normal"):
            raise ScheduleError(f"unknown noise distribution {self.family!r}")
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ScheduleError(f"degenerate truncation bounds [{self.sigma_min}, {self.sigma_max}]")
        if self.family == "log-logistic" and (self.alpha <= 0 or self.beta <= 0):
            raise ScheduleError("log-logistic needs alpha > 0 and beta > 0")
        if self.family == "log-normal" and self.std <= 0:
            raise ScheduleError("log-normal needs std > 0")

    def base_cdf(self, sigma):
        sigma = np.asarray(sigma, dtype=np.float64)
        if self.family == "log-logistic":
            return 1.0 / (1.0 + (sigma / self.alpha) ** (-self.beta))
        return ndtr((np.log(sigma) - self.mean) / self.std)

    def base_quantile(self, u):
        u = np.asarray(u, dtype=np.float64)
        if self.family == "log-logistic":
            return self.alpha * (u / (1.0 - u)) ** (1.0 / self.beta)
        return np.exp(self.mean + self.std * ndtri(u))

    def cdf(self, sigma):
        """CDF of the truncated law."""
        lo, hi = self.base_cdf(self.sigma_min), self.base_cdf(self.sigma_max)
        return np.clip((self.base_cdf(sigma) - lo) / (hi - lo), 0.0, 1.0)


def sample_train_sigma(dist: TrainNoiseDist, rng: np.random.Generator, size=None):
    """Inverse-CDF draw restricted to the quantile range of the truncation bounds."""
    lo, hi = dist.base_cdf(dist.sigma_min), dist.base_cdf(dist.sigma_max)
    u = rng.uniform(lo, hi, size=size)
    return np.clip(dist.base_quantile(u), dist.sigma_min, dist.sigma_max)


# -- ancestral split -------------------------------------------------------

def ancestral_split(sigma_from: float, sigma_to: float, eta: float = 1.0) -> tuple[float, float]:
    """Split a step into a deterministic target ``sigma_down`` and fresh noise ``sigma_up``.

    sigma_down**2 + sigma_up**2 == sigma_to**2.
    """
    if sigma_to > sigma_from:
        raise ScheduleError(f"ancestral split needs sigma_to <= sigma_from, got {sigma_to} > {sigma_from}")
    if not 0.0 <= eta <= 1.0:
        raise ScheduleError(f"eta must lie in [0, 1], got {eta}")
    if sigma_to == 0.0:
        return 0.0, 0.0
    if eta == 0.0:
        return float(sigma_to), 0.0
    sigma_up = eta * min(sigma_to, math.sqrt(sigma_to ** 2 * (sigma_from ** 2 - sigma_to ** 2) / sigma_from ** 2))
    sigma_down = math.sqrt(max(sigma_to ** 2 - sigma_up ** 2, 0.0))
    return sigma_down, sigma_up
