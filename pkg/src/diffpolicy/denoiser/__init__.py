from .base import (
    Denoiser,
    GuidanceError,
    PreconditionedDenoiser,
    Preconditioning,
    denoiser_forward,
    precondition_wrap,
    score_from_denoiser,
    sigma_column,
)
from .guidance import GuidedDenoiser, cfg_denoise
from .networks import (
    MlpNet,
    NetConfig,
    TransformerNet,
    build_denoiser,
    build_mlp_denoiser,
    build_transformer_denoiser,
)
from .oracles import ConditionalGmmOracle, GaussianOracle, GmmOracle


def oracle_denoise(oracle, a, sigma):
    """Exact posterior mean E[a0 | a] of an analytic oracle."""
    return oracle.denoise(a, None, None, sigma)
