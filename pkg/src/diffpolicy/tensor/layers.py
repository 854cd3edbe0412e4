"""Layers used by the denoiser networks.

A ``Module`` owns named ``Parameter`` objects and child modules. Names are
dotted paths (``blocks.0.attn.qkv.weight``) and are unique within a model,
which is what the checkpoint container keys on.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import core as T
from .core import DimensionError, Parameter, Tensor


class ConfigError(ValueError):
    """Invalid layer configuration."""


class Module:
    training: bool = True

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def add_param(self, name: str, value) -> Parameter:
        p = Parameter(value, name)
        self._params[name] = p
        return p

    def add_child(self, name: str, module: "Module") -> "Module":
        # parameter names become dotted paths relative to the outermost owner
        for p in module.parameters():
            p.name = f"{name}.{p.name}"
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = self.add_param("weight", _init_uniform(rng, n_in, (n_in, n_out)))
        self.bias = self.add_param("bias", np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return forward_linear(x, self.weight, self.bias)


def forward_linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    x = T.tensor(x)
    if x.ndim == 0 or weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
    out = flat @ weight
    if bias is not None:
        out = out + bias
    return out.reshape(*lead, weight.shape[1]) if x.ndim != 2 else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = self.add_param("weight", np.ones(dim))
        self.bias = self.add_param("bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate <= 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1], got {rate}")
        self.rate = rate

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return T.dropout(x, self.rate, rng, self.training)


def sinusoidal_embedding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sin/cos features, shape ``positions.shape + (dim,)``."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = positions[..., None] * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(positions.shape + (1,))], axis=-1)
    return emb


class PositionEmbedding(Module):
    """Learned position table initialised from sinusoidal features."""

    def __init__(self, length: int, dim: int):
        super().__init__()
        self.table = self.add_param("table", 0.1 * sinusoidal_embedding(np.arange(length), dim))

    def __call__(self, n: int) -> Tensor:
        return self.table[:n]


class CausalSelfAttention(Module):
    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator,
                 attn_dropout: float = 0.0, resid_dropout: float = 0.0):
        super().__init__()
        if n_heads < 1 or dim % n_heads:
            raise ConfigError(f"width {dim} is not divisible by {n_heads} heads")
        self.dim, self.n_heads = dim, n_heads
        self.qkv = self.add_child("qkv", Linear(dim, 3 * dim, rng))
        self.proj = self.add_child("proj", Linear(dim, dim, rng))
        self.attn_drop = self.add_child("attn_drop", Dropout(attn_dropout))
        self.resid_drop = self.add_child("resid_drop", Dropout(resid_dropout))

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return causal_attention(x, self, rng)


def causal_attention(x: Tensor, attn: CausalSelfAttention, rng: np.random.Generator | None = None) -> Tensor:
    """Multi-head self-attention where position ``i`` only reads positions ``<= i``.

    ``x`` is ``(T, d)`` or ``(B, T, d)``.
    """
    x = T.tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    B, L, d = x.shape
    if d != attn.dim:
        raise DimensionError(f"attention width {attn.dim} does not match input {d}")
    if L < 1:
        raise DimensionError("attention needs at least one token")
    h = attn.n_heads
    hd = d // h
    qkv = attn.qkv(x).reshape(B, L, 3, h, hd).transpose(2, 0, 3, 1, 4)  # (3, B, h, L, hd)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    mask = np.tril(np.ones((L, L), dtype=bool))
    weights = T.softmax(scores, axis=-1, mask=mask)
    weights = attn.attn_drop(weights, rng)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    out = attn.resid_drop(attn.proj(out), rng)
    return out.reshape(L, d) if squeeze else out


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dropout: float = 0.0):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(dim, hidden, rng))
        self.fc2 = self.add_child("fc2", Linear(hidden, dim, rng))
        self.drop = self.add_child("drop", Dropout(dropout))

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        return self.drop(self.fc2(T.gelu(self.fc1(x))), rng)


class Block(Module):
    """Pre-norm transformer block with residual connections."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator,
                 attn_dropout: float = 0.0, resid_dropout: float = 0.0):
        super().__init__()
        self.ln1 = self.add_child("ln1", LayerNorm(dim))
        self.attn = self.add_child("attn", CausalSelfAttention(dim, n_heads, rng, attn_dropout, resid_dropout))
        self.ln2 = self.add_child("ln2", LayerNorm(dim))
        self.mlp = self.add_child("mlp", FeedForward(dim, 4 * dim, rng, resid_dropout))

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        x = x + self.attn(self.ln1(x), rng)
        return x + self.mlp(self.ln2(x), rng)
