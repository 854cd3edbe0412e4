from .core import (
    ContractError,
    DimensionError,
    Parameter,
    Tensor,
    concat,
    gelu,
    layer_norm,
    no_grad,
    softmax,
    tensor,
    where,
)
from .layers import (
    Block,
    CausalSelfAttention,
    ConfigError,
    Dropout,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    PositionEmbedding,
    causal_attention,
    forward_linear,
)
from .optim import AdamState, EmaState, adam_step, ema_update
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
