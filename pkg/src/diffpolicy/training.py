"""Play-data windows with future-goal relabeling, and the denoising
score-matching training loop.

A batch source is any callable ``source(rng, batch_size) -> Batch``. Play
datasets and the static GMM task both provide one, so the loop itself does
not care where actions come from.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .denoiser.base import Preconditioning, denoiser_forward
from .rng import stream
from .schedules import TrainNoiseDist, sample_train_sigma
from .tensor import AdamState, Checkpoint, EmaState, adam_step, save_checkpoint
from .tensor import core as T
from .tensor.optim import ema_update

DATASET_SCHEMA = 1


class DatasetError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Raised when the loss stops being finite."""


# -- data -------------------------------------------------------------------

@dataclass
class Trajectory:
    states: np.ndarray   # (T, ds)
    actions: np.ndarray  # (T, da)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise DatasetError("states and actions must be (T, dim) arrays")
        if len(self.states) != len(self.actions):
            raise DatasetError(f"{len(self.states)} states vs {len(self.actions)} actions")
        if len(self.states) < 2:
            raise DatasetError("a trajectory needs at least 2 steps")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.actions))):
            raise DatasetError("trajectory contains non-finite values")

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class PlayDataset:
    trajectories: list[Trajectory]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trajectories:
            raise DatasetError("dataset is empty")
        ds, da = self.state_dim, self.action_dim
        for i, tr in enumerate(self.trajectories):
            if tr.states.shape[1] != ds or tr.actions.shape[1] != da:
                raise DatasetError(f"trajectory {i} has dims ({tr.states.shape[1]}, {tr.actions.shape[1]}), "
                                   f"expected ({ds}, {da})")

    @property
    def state_dim(self) -> int:
        return self.trajectories[0].states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.trajectories[0].actions.shape[1]

    def __len__(self) -> int:
        return len(self.trajectories)

    def all_states(self) -> np.ndarray:
        return np.concatenate([t.states for t in self.trajectories])

    def all_actions(self) -> np.ndarray:
        return np.concatenate([t.actions for t in self.trajectories])


def save_dataset(path, dataset: PlayDataset) -> None:
    """JSON lines: one header object, then one object per trajectory."""
    header = {"kind": "play-dataset", "schema": DATASET_SCHEMA, "n": len(dataset),
              "state_dim": dataset.state_dim, "action_dim": dataset.action_dim, "meta": dataset.meta}
    with open(Path(path), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for tr in dataset.trajectories:
            fh.write(json.dumps({"states": tr.states.tolist(), "actions": tr.actions.tolist()}) + "\n")


def load_dataset(path) -> PlayDataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
        rows = [json.loads(line) for line in lines[1:] if line.strip()]
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed JSON ({exc})") from exc
    if header.get("kind") != "play-dataset" or header.get("schema") != DATASET_SCHEMA:
        raise DatasetError(f"{path}: not a play dataset (schema {DATASET_SCHEMA})")
    if header.get("n") != len(rows):
        raise DatasetError(f"{path}: header says {header.get('n')} trajectories, found {len(rows)}")
    trajs = [Trajectory(r["states"], r["actions"]) for r in rows]
    return PlayDataset(trajs, header.get("meta", {}))


@dataclass
class Batch:
    actions: np.ndarray            # (B, c_o, da)
    states: np.ndarray | None      # (B, c_o, ds)
    goals: np.ndarray | None       # (B, c_g, dg)
    traj_index: np.ndarray | None = None
    starts: np.ndarray | None = None
    goal_index: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)


def sample_batch(dataset: PlayDataset, c_o: int, c_g: int, rng: np.random.Generator,
                 batch_size: int = 256, pad_start: bool = False) -> Batch:
    """Random windows of length ``c_o`` paired with a goal drawn after each window.

    Windows are uniform over every valid (trajectory, start) pair. The goal
    start ``j`` is uniform over ``start + c_o .. T - 1``; goal windows that
    run past the end repeat the final state.

    With ``pad_start`` a window may also begin up to ``c_o - 1`` steps before
    the trajectory, the missing steps repeating the first state and action.
    That matches how a rollout fills its state history at the first step.
    """
    lengths = np.array([len(t) for t in dataset.trajectories])
    if np.any(lengths < c_o + 1):
        short = int(np.argmin(lengths))
        raise DatasetError(f"trajectory {short} has length {lengths[short]} < window + 1 = {c_o + 1}")
    shift = c_o - 1 if pad_start else 0
    n_starts = lengths - c_o + shift
    cum = np.cumsum(n_starts)
    flat = rng.integers(0, cum[-1], size=batch_size)
    traj = np.searchsorted(cum, flat, side="right")
    starts = flat - np.concatenate([[0], cum[:-1]])[traj] - shift
    lo = starts + c_o
    goal_idx = lo + np.floor(rng.random(batch_size) * (lengths[traj] - lo)).astype(np.int64)

    ds, da = dataset.state_dim, dataset.action_dim
    S = np.empty((batch_size, c_o, ds))
    A = np.empty((batch_size, c_o, da))
    G = np.empty((batch_size, c_g, ds))
    offs_w = np.arange(c_o)
    offs_g = np.arange(c_g)
    for b in range(batch_size):
        tr = dataset.trajectories[traj[b]]
        idx = np.maximum(starts[b] + offs_w, 0)
        S[b] = tr.states[idx]
        A[b] = tr.actions[idx]
        G[b] = tr.states[np.minimum(goal_idx[b] + offs_g, len(tr) - 1)]
    return Batch(A, S, G, traj, starts, goal_idx)


def play_batch_source(dataset: PlayDataset, c_o: int, c_g: int, pad_start: bool = False) -> Callable:
    def source(rng, batch_size):
        return sample_batch(dataset, c_o, c_g, rng, batch_size, pad_start)
    return source


# -- objective ---------------------------------------------------------------

def loss_weight(sigma, sigma_data: float = 0.5):
    """(sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
    return Preconditioning(sigma_data).loss_weight(sigma)


@dataclass
class LossInfo:
    goal_mask: np.ndarray | None
    per_sample: np.ndarray


def score_matching_loss(model, batch: Batch, sigma: np.ndarray, rng: np.random.Generator,
                        goal_dropout: float = 0.0, sigma_data: float = 0.5,
                        noise: np.ndarray | None = None) -> tuple[T.Tensor, LossInfo]:
    """Weighted denoising loss averaged over the batch.

    Per sample: alpha(sigma) times the squared error summed over action dims
    and averaged over window positions. ``noise`` replaces the Gaussian
    perturbation when given (``0`` turns the loss into a reconstruction check).
    Goals are swapped for the null token per sample with probability
    ``goal_dropout``.
    """
    if not 0.0 <= goal_dropout <= 1.0:
        raise ValueError("goal dropout rate must lie in [0, 1]")
    a = np.asarray(batch.actions, dtype=np.float64)
    B = len(a)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64).reshape(-1), (B,))
    sig_col = sigma.reshape((B,) + (1,) * (a.ndim - 1))
    if noise is None:
        noise = sig_col * rng.standard_normal(a.shape)
    mask = None
    if batch.goals is not None and goal_dropout > 0:
        mask = rng.random(B) < goal_dropout
    d = denoiser_forward(model, a + noise, batch.states, batch.goals, sigma, mask, rng)
    err = d - a
    sq = err * err
    per_dim_sum = T.tsum(sq, axis=-1)
    per_sample = T.mean(per_dim_sum, axis=tuple(range(1, per_dim_sum.ndim))) if per_dim_sum.ndim > 1 else per_dim_sum
    weighted = per_sample * loss_weight(sigma, sigma_data)
    return T.mean(weighted), LossInfo(mask, weighted.data.copy())


# -- loop --------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-4
    goal_dropout: float = 0.1
    noise: TrainNoiseDist = field(default_factory=TrainNoiseDist)
    sigma_data: float = 0.5
    ema_decay: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.goal_dropout <= 1.0:
            raise ValueError(f"goal dropout rate must lie in [0, 1], got {self.goal_dropout}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("EMA decay must lie in [0, 1)")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[tuple[int, float, float]]  # (step, loss, mean sigma)


def _module(model):
    inner = getattr(model, "inner", None)
    if inner is None or not hasattr(inner, "parameters"):
        raise TypeError("training needs a preconditioned network model")
    return inner


def make_checkpoint(module, ema: EmaState | None, config_digest: str = "", metadata: dict | None = None) -> Checkpoint:
    arrays = {f"raw/{k}": v for k, v in module.state_dict().items()}
    if ema is not None:
        arrays.update({f"ema/{k}": v.copy() for k, v in ema.shadow.items()})
    return Checkpoint(arrays, config_digest, ema is not None, dict(metadata or {}))


def load_weights(model, ckpt: Checkpoint, use_ema: bool = True) -> None:
    """Load the EMA weights when present (and requested), the raw ones otherwise."""
    group = ckpt.group("ema") if use_ema and ckpt.ema else {}
    if not group:
        group = ckpt.group("raw")
    _module(model).load_state_dict(group)


def write_loss_csv(path, history) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "sigma_mean"])
        for step, loss, sig in history:
            w.writerow([step, repr(loss), repr(sig)])


def train(source: Callable, model, cfg: TrainConfig, config_digest: str = "",
          metadata: dict | None = None, checkpoint_path=None, loss_path=None,
          on_step: Callable | None = None) -> TrainResult:
    """Adam on the score-matching loss with an EMA shadow of the weights."""
    module = _module(model)
    if abs(getattr(model, "sigma_data", cfg.sigma_data) - cfg.sigma_data) > 0:
        raise ValueError(f"model sigma_data {model.sigma_data} differs from config {cfg.sigma_data}")
    params = module.parameters()
    adam = AdamState(lr=cfg.lr)
    ema = EmaState.from_params(params, cfg.ema_decay)
    rng_batch = stream(cfg.seed, "train", "batch")
    rng_sigma = stream(cfg.seed, "train", "sigma")
    rng_noise = stream(cfg.seed, "train", "noise")
    history: list[tuple[int, float, float]] = []
    module.train()
    for step in range(1, cfg.steps + 1):
        batch = source(rng_batch, cfg.batch_size)
        sigma = sample_train_sigma(cfg.noise, rng_sigma, len(batch))
        module.zero_grad()
        try:
            loss, _ = score_matching_loss(model, batch, sigma, rng_noise, cfg.goal_dropout, cfg.sigma_data)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError("loss is not finite")
            loss.backward()
        except FloatingPointError as exc:
            raise TrainingError(
                f"non-finite value at step {step}: {exc}; sigma range [{sigma.min():.4g}, {sigma.max():.4g}], "
                f"|actions| max {np.abs(batch.actions).max():.4g}") from exc
        adam_step(params, adam)
        ema_update(params, ema)
        history.append((step, value, float(sigma.mean())))
        if on_step is not None:
            on_step(step, value)
    module.eval()
    meta = {"steps": cfg.steps, "seed": cfg.seed, "adam_step": adam.step}
    meta.update(metadata or {})
    ckpt = make_checkpoint(module, ema, config_digest, meta)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, ckpt)
    if loss_path is not None:
        write_loss_csv(loss_path, history)
    return TrainResult(ckpt, history)
