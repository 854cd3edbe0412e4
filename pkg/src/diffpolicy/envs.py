"""Desk-scale goal-conditioned tasks.

``PlanarPushEnv`` is a point agent in the square [-1, 1]^2 with two target
areas; a scripted controller produces multimodal play data by choosing a
target with a coin flip. ``StaticGmmTask`` has no dynamics at all: the goal
picks a Gaussian mixture over actions, so the ideal denoiser is known in
closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser.oracles import ConditionalGmmOracle, GmmOracle
from .rng import stream
from .samplers import SamplerSpec, sample_action
from .training import Batch, PlayDataset, Trajectory

DEFAULT_TARGETS = ((-0.6, 0.5), (0.6, 0.5))


# -- planar push ------------------------------------------------------------

@dataclass(frozen=True)
class PlanarPushEnv:
    targets: tuple = DEFAULT_TARGETS
    start: tuple = (0.0, -0.5)
    start_jitter: float = 0.05
    dt: float = 0.1
    horizon: int = 64
    radius: float = 0.1

    @property
    def target_array(self) -> np.ndarray:
        return np.asarray(self.targets, dtype=np.float64)

    def reset(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Start position(s) with uniform jitter; ``(2,)`` or ``(n, 2)``."""
        shape = (2,) if n is None else (n, 2)
        return np.asarray(self.start) + rng.uniform(-self.start_jitter, self.start_jitter, size=shape)

    def step(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
        return np.clip(np.asarray(x, dtype=np.float64) + self.dt * a, -1.0, 1.0)

    def target_hits(self, x: np.ndarray) -> np.ndarray:
        """Boolean ``(..., n_targets)``: position within the success radius of each target."""
        d = np.linalg.norm(np.asarray(x)[..., None, :] - self.target_array, axis=-1)
        return d <= self.radius


@dataclass(frozen=True)
class ScriptedController:
    gain: float = 1.0
    noise: float = 0.05
    hold_steps: int = 3

    def action(self, env: PlanarPushEnv, x, target, rng: np.random.Generator | None = None) -> np.ndarray:
        a = self.gain * (np.asarray(target) - x) / env.dt
        if self.noise > 0 and rng is not None:
            a = a + self.noise * rng.standard_normal(np.shape(a))
        return np.clip(a, -1.0, 1.0)

    def rollout(self, env: PlanarPushEnv, rng: np.random.Generator,
                target_index: int | None = None) -> tuple[Trajectory, int]:
        """Drive to one target and hold briefly; returns the trajectory and the target index."""
        k = int(rng.integers(len(env.targets))) if target_index is None else target_index
        target = env.target_array[k]
        x = env.reset(rng)
        states, actions = [], []
        hold = 0
        for _ in range(env.horizon):
            a = self.action(env, x, target, rng)
            states.append(x)
            actions.append(a)
            x = env.step(x, a)
            if np.linalg.norm(x - target) <= 0.5 * env.radius:
                hold += 1
                if hold > self.hold_steps:
                    break
        return Trajectory(np.array(states), np.array(actions)), k


def generate_play_data(env: PlanarPushEnv, controller: ScriptedController, n_traj: int,
                       rng: np.random.Generator) -> PlayDataset:
    if n_traj < 1:
        raise ValueError("need at least one trajectory")
    trajs, chosen = [], []
    for _ in range(n_traj):
        tr, k = controller.rollout(env, rng)
        trajs.append(tr)
        chosen.append(k)
    return PlayDataset(trajs, {"task": "planar-push", "targets": [list(t) for t in env.targets],
                               "target_counts": np.bincount(chosen, minlength=len(env.targets)).tolist()})


def two_means_separation(points: np.ndarray, rng: np.random.Generator, iters: int = 50) -> float:
    """Distance between 2-means centres over the pooled within-cluster std."""
    pts = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    centres = pts[rng.choice(len(pts), size=2, replace=False)]
    for _ in range(iters):
        lab = np.argmin(((pts[:, None] - centres[None]) ** 2).sum(-1), axis=1)
        new = np.array([pts[lab == j].mean(0) if np.any(lab == j) else centres[j] for j in range(2)])
        if np.allclose(new, centres):
            break
        centres = new
    lab = np.argmin(((pts[:, None] - centres[None]) ** 2).sum(-1), axis=1)
    spread = np.sqrt(((pts - centres[lab]) ** 2).sum(-1).mean())
    return float(np.linalg.norm(centres[0] - centres[1]) / max(spread, 1e-12))


# -- normalisation ----------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    """Actions scaled from their data range to [-1, 1]; states standardised."""

    action_lo: np.ndarray
    action_hi: np.ndarray
    state_mean: np.ndarray
    state_std: np.ndarray

    @classmethod
    def fit(cls, dataset: PlayDataset) -> "Normalizer":
        acts, states = dataset.all_actions(), dataset.all_states()
        std = states.std(0)
        return cls(acts.min(0), acts.max(0), states.mean(0), np.where(std > 0, std, 1.0))

    def _span(self):
        span = self.action_hi - self.action_lo
        return np.where(span > 0, span, 1.0)

    def norm_action(self, a):
        return 2.0 * (np.asarray(a) - self.action_lo) / self._span() - 1.0

    def denorm_action(self, a):
        return (np.asarray(a) + 1.0) * 0.5 * self._span() + self.action_lo

    def norm_state(self, s):
        return (np.asarray(s) - self.state_mean) / self.state_std

    def denorm_state(self, s):
        return np.asarray(s) * self.state_std + self.state_mean

    def apply(self, dataset: PlayDataset) -> PlayDataset:
        trajs = [Trajectory(self.norm_state(t.states), self.norm_action(t.actions)) for t in dataset.trajectories]
        return PlayDataset(trajs, dict(dataset.meta))

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"action_lo": self.action_lo, "action_hi": self.action_hi,
                "state_mean": self.state_mean, "state_std": self.state_std}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "Normalizer":
        return cls(*(np.asarray(arrays[k], dtype=np.float64)
                     for k in ("action_lo", "action_hi", "state_mean", "state_std")))


# -- policy rollouts -----------------------------------------------------------

@dataclass
class RolloutResult:
    result: np.ndarray     # reached the conditioned target
    reward: np.ndarray     # reached any target
    goal_index: np.ndarray
    final_pos: np.ndarray
    target_hits: np.ndarray  # (n, n_targets): each target reached at some step

    def __post_init__(self):
        assert np.all(self.result <= self.reward)


def rollout_policy(env: PlanarPushEnv, model, norm: Normalizer, spec: SamplerSpec, n_rollouts: int,
                   seed: int, window: int, goal_window: int = 1,
                   goal_index: np.ndarray | None = None) -> RolloutResult:
    """Run ``n_rollouts`` episodes in lockstep for one evaluation seed.

    Goals are target positions, one per rollout (coin flip unless given). The
    policy sees the last ``window`` states, padded with the first state at
    the episode start, and executes the action at the newest position.
    """
    rng_env = stream(seed, "eval", "env")
    rng_pol = stream(seed, "eval", "policy")
    n_t = len(env.targets)
    if goal_index is None:
        goal_index = rng_env.integers(n_t, size=n_rollouts)
    goal_index = np.asarray(goal_index)
    goals_raw = env.target_array[goal_index]
    goals = np.repeat(norm.norm_state(goals_raw)[:, None, :], goal_window, axis=1)
    x = env.reset(rng_env, n_rollouts)
    hist = [x] * window
    hit = np.zeros((n_rollouts, n_t), dtype=bool)
    da = len(norm.action_lo)
    for _ in range(env.horizon):
        states = norm.norm_state(np.stack(hist[-window:], axis=1))
        a_win = sample_action(model, states, goals, spec, (window, da), rng_pol)
        a = norm.denorm_action(a_win[:, -1, :])
        x = env.step(x, a)
        hist.append(x)
        hit |= env.target_hits(x)
    result = hit[np.arange(n_rollouts), goal_index]
    return RolloutResult(result, hit.any(axis=1), goal_index, x, hit)


def evaluate_unconditional(env: PlanarPushEnv, model, norm: Normalizer, spec: SamplerSpec, n_rollouts: int,
                           seed: int, window: int, goal_window: int = 1) -> RolloutResult:
    """Rollouts with guidance 0: the goal is masked out of every denoiser call."""
    if not getattr(model, "supports_unconditional", False):
        from .denoiser.base import GuidanceError
        raise GuidanceError("unconditional evaluation needs a model trained with goal dropout")
    spec0 = SamplerSpec(spec.family, spec.schedule, spec.eta, spec.extra_steps, 0.0, spec.seed)
    return rollout_policy(env, model, norm, spec0, n_rollouts, seed, window, goal_window)


# -- static conditional GMM ------------------------------------------------------

@dataclass(frozen=True)
class StaticGmmTask:
    """Two goals, each selecting a two-component mixture over 2-D actions."""

    goal_codes: np.ndarray = field(default_factory=lambda: np.array([[-1.0, 0.0], [1.0, 0.0]]))
    means: np.ndarray = field(default_factory=lambda: np.array([
        [[-0.8, -0.8], [-0.8, 0.8]],
        [[0.8, -0.8], [0.8, 0.8]],
    ]))
    weights: np.ndarray = field(default_factory=lambda: np.array([[0.5, 0.5], [0.7, 0.3]]))
    std: float = 0.2

    @property
    def oracle(self) -> ConditionalGmmOracle:
        mixes = tuple(GmmOracle(w, m, np.full(len(w), self.std)) for w, m in zip(self.weights, self.means))
        prior = np.full(len(self.goal_codes), 1.0 / len(self.goal_codes))
        return ConditionalGmmOracle(np.asarray(self.goal_codes), mixes, prior)

    def sample(self, rng: np.random.Generator, n: int, goal_index: np.ndarray | None = None):
        """``(actions (n, 1, 2), goals (n, 1, 2), goal_index)``."""
        if goal_index is None:
            goal_index = rng.integers(len(self.goal_codes), size=n)
        goal_index = np.asarray(goal_index)
        acts = np.empty((n, self.means.shape[-1]))
        for k in range(len(self.goal_codes)):
            sel = np.flatnonzero(goal_index == k)
            if len(sel):
                acts[sel] = self.oracle.mixtures[k].sample(len(sel), rng)
        goals = np.asarray(self.goal_codes)[goal_index]
        return acts[:, None, :], goals[:, None, :], goal_index

    def batch_source(self):
        def source(rng, batch_size):
            a, g, _ = self.sample(rng, batch_size)
            return Batch(a, None, g)
        return source
