"""Solvers for the probability-flow ODE da/dsigma = (a - D(a, sigma)) / sigma and
its ancestral (stochastic) variants.

Each ``*_step`` moves a sample from ``sigma`` to ``sigma_next``. Steps that
need extra model evaluations take ``denoise_fn(a, sigma) -> D``. A step that
lands on ``sigma_next == 0`` returns the denoiser output at ``sigma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .denoiser.guidance import GuidedDenoiser
from .schedules import NoiseSchedule, ancestral_split, build_schedule

DenoiseFn = Callable[[np.ndarray, float], np.ndarray]

DETERMINISTIC_FAMILIES = ("euler", "heun", "ddim", "dpm-2", "dpm++2s", "dpm++2m")
ANCESTRAL_FAMILIES = ("euler-ancestral", "dpm-2-ancestral", "dpm++2s-ancestral")
FAMILIES = DETERMINISTIC_FAMILIES + ANCESTRAL_FAMILIES
# ablation grid order
GRID_FAMILIES = ("euler", "heun", "ddim", "dpm-2", "dpm++2s", "dpm++2m")

# the deterministic counterpart an ancestral family collapses to at eta = 0
DETERMINISTIC_OF = {"euler-ancestral": "euler", "dpm-2-ancestral": "dpm-2", "dpm++2s-ancestral": "dpm++2s"}


class SamplerError(ValueError):
    pass


def to_d(a, sigma, denoised):
    return (a - denoised) / sigma


def _check_sigma(sigma):
    if sigma <= 0:
        raise SamplerError(f"step needs sigma > 0, got {sigma}")


# -- first order ------------------------------------------------------------

def euler_step(a, sigma, sigma_next, denoised):
    _check_sigma(sigma)
    if sigma_next == 0:
        return denoised
    return a + (sigma_next - sigma) * to_d(a, sigma, denoised)


def ddim_step(a, sigma, sigma_next, denoised):
    """First-order exponential integrator in data-prediction form."""
    _check_sigma(sigma)
    if sigma_next == 0:
        return denoised
    ratio = sigma_next / sigma
    return ratio * a + (1.0 - ratio) * denoised


def _noise(rng, shape, sigma_up):
    if sigma_up == 0:
        return 0.0
    if rng is None:
        raise SamplerError("stochastic step needs an rng stream")
    return sigma_up * rng.standard_normal(shape)


def euler_ancestral_step(a, sigma, sigma_next, denoise_fn: DenoiseFn, eta, rng, denoised=None):
    _check_sigma(sigma)
    if denoised is None:
        denoised = denoise_fn(a, sigma)
    sigma_down, sigma_up = ancestral_split(sigma, sigma_next, eta)
    a = euler_step(a, sigma, sigma_down, denoised)
    if sigma_up == 0:
        return a
    return a + _noise(rng, np.shape(a), sigma_up)


# -- second order -------------------------------------------------------------

def heun_step(a, sigma, sigma_next, denoise_fn: DenoiseFn, denoised=None):
    """Euler predictor, trapezoidal corrector (two evaluations on interior steps)."""
    _check_sigma(sigma)
    if denoised is None:
        denoised = denoise_fn(a, sigma)
    if sigma_next == 0:
        return euler_step(a, sigma, sigma_next, denoised)
    d = to_d(a, sigma, denoised)
    dt = sigma_next - sigma
    a_pred = a + dt * d
    d_next = to_d(a_pred, sigma_next, denoise_fn(a_pred, sigma_next))
    return a + dt * 0.5 * (d + d_next)


def _dpm2_to(a, sigma, target, denoise_fn, denoised):
    if target == 0:
        return euler_step(a, sigma, target, denoised)
    d = to_d(a, sigma, denoised)
    sigma_mid = math.exp(0.5 * (math.log(sigma) + math.log(target)))
    a_mid = a + (sigma_mid - sigma) * d
    d_mid = to_d(a_mid, sigma_mid, denoise_fn(a_mid, sigma_mid))
    return a + (target - sigma) * d_mid


def dpm2_step(a, sigma, sigma_next, denoise_fn: DenoiseFn, denoised=None):
    """Midpoint rule with the midpoint taken in log-sigma."""
    _check_sigma(sigma)
    if denoised is None:
        denoised = denoise_fn(a, sigma)
    return _dpm2_to(a, sigma, sigma_next, denoise_fn, denoised)


def dpm2_ancestral_step(a, sigma, sigma_next, denoise_fn: DenoiseFn, eta, rng, denoised=None):
    _check_sigma(sigma)
    if denoised is None:
        denoised = denoise_fn(a, sigma)
    sigma_down, sigma_up = ancestral_split(sigma, sigma_next, eta)
    a = _dpm2_to(a, sigma, sigma_down, denoise_fn, denoised)
    if sigma_up == 0:
        return a
    return a + _noise(rng, np.shape(a), sigma_up)


def _dpmpp_2s_to(a, sigma, target, denoise_fn, denoised):
    if target == 0:
        return denoised
    # lambda = -ln sigma; h is the forward difference lambda(target) - lambda(sigma)
    lam, lam_next = -math.log(sigma), -math.log(target)
    h = lam_next - lam
    lam_mid = lam + 0.5 * h
    sigma_mid = math.exp(-lam_mid)
    a_mid = (sigma_mid / sigma) * a - math.expm1(-0.5 * h) * denoised
    denoised_mid = denoise_fn(a_mid, sigma_mid)
    return (target / sigma) * a - math.expm1(-h) * denoised_mid


def dpmpp_2s_step(a, sigma, sigma_next, denoise_fn: DenoiseFn, denoised=None):
    """Single-step second-order solver with one extra evaluation at the lambda midpoint."""
    _check_sigma(sigma)
    if denoised is None:
        denoised = denoise_fn(a, sigma)
    return _dpmpp_2s_to(a, sigma, sigma_next, denoise_fn, denoised)


def dpmpp_2s_ancestral_step(a, sigma, sigma_next, denoise_fn: DenoiseFn, eta, rng, denoised=None):
    _check_sigma(sigma)
    if denoised is None:
        denoised = denoise_fn(a, sigma)
    sigma_down, sigma_up = ancestral_split(sigma, sigma_next, eta)
    a = _dpmpp_2s_to(a, sigma, sigma_down, denoise_fn, denoised)
    if sigma_up == 0:
        return a
    return a + _noise(rng, np.shape(a), sigma_up)


@dataclass
class MultistepHistory:
    denoised: np.ndarray | None = None
    sigma: float | None = None


def dpmpp_2m_step(a, sigma, sigma_next, denoised, history: MultistepHistory | None = None):
    """Two-step linear multistep reusing the previous denoiser output.

    Returns ``(a_next, history)``. Without history the step is ``ddim_step``.
    """
    _check_sigma(sigma)
    new_history = MultistepHistory(denoised, sigma)
    if history is None or history.denoised is None or sigma_next == 0:
        return ddim_step(a, sigma, sigma_next, denoised), new_history
    lam, lam_next, lam_prev = -math.log(sigma), -math.log(sigma_next), -math.log(history.sigma)
    h = lam_next - lam
    r = (lam - lam_prev) / h
    d_combined = (1.0 + 1.0 / (2.0 * r)) * denoised - (1.0 / (2.0 * r)) * history.denoised
    return (sigma_next / sigma) * a - math.expm1(-h) * d_combined, new_history


# -- extra refinement at the lowest noise level -----------------------------

def extra_steps_refine(a, sigma_low: float, denoise_fn: DenoiseFn, steps: int,
                       rng: np.random.Generator | None = None):
    """``steps`` further denoising passes holding the noise level at ``sigma_low``.

    With an rng each pass re-noises to ``sigma_low`` first; without one the
    denoiser is simply iterated.
    """
    if steps < 0:
        raise SamplerError("extra steps must be >= 0")
    for _ in range(steps):
        x = a if rng is None else a + sigma_low * rng.standard_normal(np.shape(a))
        a = denoise_fn(x, sigma_low)
    return a


# -- full sampler ---------------------------------------------------------------

@dataclass(frozen=True)
class SamplerSpec:
    family: str = "ddim"
    schedule: NoiseSchedule = field(default_factory=lambda: build_schedule("exponential", 3, 0.005, 1.0))
    eta: float = 1.0
    extra_steps: int = 0
    guidance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SamplerError(f"unknown sampler family {self.family!r}; expected one of {FAMILIES}")
        if self.extra_steps < 0:
            raise SamplerError("extra_steps must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise SamplerError("eta must lie in [0, 1]")

    @property
    def stochastic(self) -> bool:
        return self.family in ANCESTRAL_FAMILIES and self.eta > 0


def sample_action(model, state, goal, spec: SamplerSpec, action_shape: tuple,
                  rng: np.random.Generator, n: int | None = None,
                  a_init: np.ndarray | None = None, trace: list | None = None) -> np.ndarray:
    """Draw a_0 ~ N(0, sigma_0^2 I) and integrate down the schedule.

    ``state``/``goal`` carry a leading batch axis; ``n`` sets the batch when
    both are None. Returns ``(B,) + action_shape``. If ``trace`` is a list,
    the iterate after every step is appended to it.
    """
    if spec.guidance != 1.0:
        model = GuidedDenoiser(model, spec.guidance)
    if n is None:
        ref = state if state is not None else goal
        if ref is None:
            raise SamplerError("batch size unknown: pass n or a state/goal batch")
        n = len(ref)
    sigmas = spec.schedule.with_terminal()

    def denoise_fn(x, sigma):
        return model.denoise(x, state, goal, sigma)

    if a_init is None:
        a = sigmas[0] * rng.standard_normal((n,) + tuple(action_shape))
    else:
        a = np.array(a_init, dtype=np.float64)
    history = None
    fam = spec.family
    for i in range(len(sigmas) - 1):
        sigma, sigma_next = float(sigmas[i]), float(sigmas[i + 1])
        denoised = denoise_fn(a, sigma)
        if fam == "euler":
            a = euler_step(a, sigma, sigma_next, denoised)
        elif fam == "ddim":
            a = ddim_step(a, sigma, sigma_next, denoised)
        elif fam == "heun":
            a = heun_step(a, sigma, sigma_next, denoise_fn, denoised)
        elif fam == "dpm-2":
            a = dpm2_step(a, sigma, sigma_next, denoise_fn, denoised)
        elif fam == "dpm++2s":
            a = dpmpp_2s_step(a, sigma, sigma_next, denoise_fn, denoised)
        elif fam == "dpm++2m":
            a, history = dpmpp_2m_step(a, sigma, sigma_next, denoised, history)
        elif fam == "euler-ancestral":
            a = euler_ancestral_step(a, sigma, sigma_next, denoise_fn, spec.eta, rng, denoised)
        elif fam == "dpm-2-ancestral":
            a = dpm2_ancestral_step(a, sigma, sigma_next, denoise_fn, spec.eta, rng, denoised)
        else:
            a = dpmpp_2s_ancestral_step(a, sigma, sigma_next, denoise_fn, spec.eta, rng, denoised)
        if trace is not None:
            trace.append(np.array(a))
    if spec.extra_steps:
        a = extra_steps_refine(a, float(sigmas[-2]), denoise_fn, spec.extra_steps,
                               rng if spec.stochastic else None)
    return a
