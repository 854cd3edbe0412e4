from __future__ import annotations

import numpy as np

from .base import GuidanceError


def cfg_denoise(model, a, state, goal, sigma, guidance: float) -> np.ndarray:
    """lambda * D(a|s,g) + (1 - lambda) * D(a|s).

    At fixed (a, sigma) the denoiser and the score are affinely related, so
    this output carries the score lambda * score_cond + (1 - lambda) * score_uncond.
    """
    if guidance == 1.0:
        return model.denoise(a, state, goal, sigma)
    if not getattr(model, "supports_unconditional", False):
        raise GuidanceError("guidance != 1 needs a model trained with goal dropout")
    if guidance == 0.0:
        return model.denoise(a, state, None, sigma)
    d_cond = model.denoise(a, state, goal, sigma)
    d_uncond = model.denoise(a, state, None, sigma)
    return guidance * d_cond + (1.0 - guidance) * d_uncond


class GuidedDenoiser:
    """Wraps a goal-dropout model so every call goes through ``cfg_denoise``."""

    supports_unconditional = False

    def __init__(self, model, guidance: float):
        if guidance != 1.0 and not getattr(model, "supports_unconditional", False):
            raise GuidanceError("guidance != 1 needs a model trained with goal dropout")
        self.model = model
        self.guidance = float(guidance)

    def denoise(self, a, state, goal, sigma) -> np.ndarray:
        return cfg_denoise(self.model, a, state, goal, sigma, self.guidance)
