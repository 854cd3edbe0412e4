"""Learned inner networks F(c_in a, s, g, c_noise).

Both networks take action windows ``(B, c_o, da)``, state windows
``(B, c_o, ds)`` and goal windows ``(B, c_g, dg)``. A per-sample boolean
``goal_mask`` swaps the goal embedding for a learned null embedding; zeros
would not do, since zero is a valid goal after normalisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import Block, LayerNorm, Linear, Module, PositionEmbedding, Tensor
from ..tensor import core as T
from ..tensor.layers import ConfigError
from .base import PreconditionedDenoiser

NOISE_FREQS = np.array([1.0, 2.0, 4.0, 8.0])


def noise_features(c_noise: np.ndarray) -> np.ndarray:
    """``(B,) -> (B, 1 + 2 * len(NOISE_FREQS))`` fixed Fourier features."""
    c = np.asarray(c_noise, dtype=np.float64).reshape(-1, 1)
    ang = c * NOISE_FREQS
    return np.concatenate([c, np.sin(ang), np.cos(ang)], axis=1)


N_NOISE_FEATURES = 1 + 2 * len(NOISE_FREQS)


@dataclass(frozen=True)
class NetConfig:
    kind: str = "transformer"  # "mlp" | "transformer"
    action_dim: int = 2
    state_dim: int = 2
    goal_dim: int = 2
    window: int = 5
    goal_window: int = 1
    width: int = 64
    depth: int = 2
    heads: int = 4
    attn_dropout: float = 0.0
    resid_dropout: float = 0.0

    def __post_init__(self):
        if self.window < 1 or self.goal_window < 1:
            raise ConfigError("window sizes must be >= 1")
        if self.kind not in ("mlp", "transformer"):
            raise ConfigError(f"unknown network kind {self.kind!r}")


def _goal_select(goal_emb: Tensor | None, null: Tensor, goal_mask, batch: int, shape) -> Tensor:
    null_b = T.tensor(null) * np.ones(shape)
    if goal_emb is None:
        return null_b
    if goal_mask is None:
        return goal_emb
    mask = np.asarray(goal_mask, dtype=bool).reshape((batch,) + (1,) * (len(shape) - 1))
    if not mask.any():
        return goal_emb
    return T.where(mask, null_b, goal_emb)


class MlpNet(Module):
    """Residual GELU MLP over flattened windows."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.act_in = self.add_child("act_in", Linear(cfg.window * cfg.action_dim, w, rng))
        self.state_in = self.add_child("state_in", Linear(cfg.window * cfg.state_dim, w, rng, bias=False))
        self.goal_in = self.add_child("goal_in", Linear(cfg.goal_window * cfg.goal_dim, w, rng))
        self.noise_in = self.add_child("noise_in", Linear(N_NOISE_FEATURES, w, rng, bias=False))
        self.null_goal = self.add_param("null_goal", 0.02 * rng.standard_normal(w))
        self.hidden = [self.add_child(f"hidden.{i}", Linear(w, w, rng)) for i in range(cfg.depth)]
        self.out = self.add_child("out", Linear(w, cfg.window * cfg.action_dim, rng))
        self.out.weight.data *= 0.1

    def __call__(self, a_in, state, goal, c_noise, goal_mask=None, rng=None) -> Tensor:
        cfg = self.cfg
        B = a_in.shape[0]
        a_flat = np.asarray(a_in).reshape(B, -1)
        h = self.act_in(a_flat) + self.noise_in(noise_features(c_noise))
        if state is not None:
            h = h + self.state_in(np.asarray(state, dtype=np.float64).reshape(B, -1))
        g = None if goal is None else self.goal_in(np.asarray(goal, dtype=np.float64).reshape(B, -1))
        h = h + _goal_select(g, self.null_goal, goal_mask, B, (B, cfg.width))
        h = T.gelu(h)
        for layer in self.hidden:
            h = h + T.gelu(layer(h))
        return self.out(h).reshape(a_in.shape)


class TransformerNet(Module):
    """Causal transformer over ``[goal tokens] + [(state+noise), action] * window``.

    The denoised action for timestep ``t`` is read from the output at the
    action token of ``t``, so it sees the goal, states up to ``t`` and noisy
    actions up to ``t``.
    """

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.goal_emb = self.add_child("goal_emb", Linear(cfg.goal_dim, w, rng))
        self.state_emb = self.add_child("state_emb", Linear(cfg.state_dim, w, rng))
        self.action_emb = self.add_child("action_emb", Linear(cfg.action_dim, w, rng))
        self.noise_emb = self.add_child("noise_emb", Linear(N_NOISE_FEATURES, w, rng))
        self.null_goal = self.add_param("null_goal", 0.02 * rng.standard_normal(w))
        self.pos = self.add_child("pos", PositionEmbedding(cfg.window, w))
        self.goal_pos = self.add_child("goal_pos", PositionEmbedding(cfg.goal_window, w))
        self.blocks = [self.add_child(f"blocks.{i}", Block(w, cfg.heads, rng, cfg.attn_dropout, cfg.resid_dropout))
                       for i in range(cfg.depth)]
        self.ln_f = self.add_child("ln_f", LayerNorm(w))
        self.head = self.add_child("head", Linear(w, cfg.action_dim, rng))
        self.head.weight.data *= 0.1

    def __call__(self, a_in, state, goal, c_noise, goal_mask=None, rng=None) -> Tensor:
        cfg = self.cfg
        a_in = np.asarray(a_in, dtype=np.float64)
        B, c_o = a_in.shape[0], a_in.shape[1]
        w = cfg.width
        pos = self.pos(c_o)
        noise = self.noise_emb(noise_features(c_noise)).reshape(B, 1, w)
        s_tok = self.state_emb(np.asarray(state, dtype=np.float64)) + noise + pos
        a_tok = self.action_emb(a_in) + pos
        body = T.stack([s_tok, a_tok], axis=2).reshape(B, 2 * c_o, w)
        g_emb = None if goal is None else self.goal_emb(np.asarray(goal, dtype=np.float64))
        c_g = cfg.goal_window
        g_tok = _goal_select(g_emb, self.null_goal, goal_mask, B, (B, c_g, w)) + self.goal_pos(c_g)
        x = T.concat([g_tok, body], axis=1)
        for blk in self.blocks:
            x = blk(x, rng)
        x = self.ln_f(x)
        act_out = x[:, c_g + 1::2, :]
        return self.head(act_out)


def build_inner(cfg: NetConfig, rng: np.random.Generator) -> Module:
    return MlpNet(cfg, rng) if cfg.kind == "mlp" else TransformerNet(cfg, rng)


def build_mlp_denoiser(cfg: NetConfig, rng: np.random.Generator, sigma_data: float = 0.5,
                       supports_unconditional: bool = False) -> PreconditionedDenoiser:
    cfg = NetConfig(**{**cfg.__dict__, "kind": "mlp"})
    return PreconditionedDenoiser(MlpNet(cfg, rng), sigma_data, supports_unconditional)


def build_transformer_denoiser(cfg: NetConfig, rng: np.random.Generator, sigma_data: float = 0.5,
                               supports_unconditional: bool = False) -> PreconditionedDenoiser:
    cfg = NetConfig(**{**cfg.__dict__, "kind": "transformer"})
    return PreconditionedDenoiser(TransformerNet(cfg, rng), sigma_data, supports_unconditional)


def build_denoiser(cfg: NetConfig, rng: np.random.Generator, sigma_data: float = 0.5,
                   supports_unconditional: bool = False) -> PreconditionedDenoiser:
    return PreconditionedDenoiser(build_inner(cfg, rng), sigma_data, supports_unconditional)
