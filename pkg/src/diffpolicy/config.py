"""Experiment configuration: a YAML tree mapped onto nested dataclasses.

Unknown keys are rejected at every level. Two content digests are derived
from the resolved config:

* ``digest`` covers everything and is stamped on every artifact.
* ``lineage_digest`` covers only what determines a trained model (task,
  seed, data, model, train). Evaluation refuses a checkpoint whose lineage
  differs from the config unless forced; a mismatch of the full digest
  alone (say, a different sampler) only warns.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .samplers import FAMILIES as SAMPLER_FAMILIES
from .schedules import FAMILIES as SCHEDULE_FAMILIES

TASKS = ("gmm", "planar-push")
PATH_ENV = {"out_dir": "DIFFPOLICY_OUT_DIR", "dataset": "DIFFPOLICY_DATASET", "checkpoint": "DIFFPOLICY_CHECKPOINT"}


class ConfigError(ValueError):
    pass


@dataclass
class PathsSection:
    out_dir: str = "runs/default"
    dataset: str = ""      # empty: <out_dir>/dataset.jsonl
    checkpoint: str = ""   # empty: <out_dir>/model.ckpt


@dataclass
class DataSection:
    n_traj: int = 500


@dataclass
class ModelSection:
    kind: str = "transformer"
    width: int = 64
    depth: int = 2
    heads: int = 4
    window: int = 5
    goal_window: int = 1
    attn_dropout: float = 0.0
    resid_dropout: float = 0.0
    sigma_data: float = 0.5


@dataclass
class NoiseSection:
    family: str = "log-logistic"
    alpha: float = 0.5
    beta: float = 0.5
    mean: float = -1.2
    std: float = 1.2
    sigma_min: float = 0.005
    sigma_max: float = 1.0


@dataclass
class TrainSection:
    steps: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    goal_dropout: float = 0.1
    ema_decay: float = 0.999
    noise: NoiseSection = field(default_factory=NoiseSection)


@dataclass
class SamplerSection:
    family: str = "ddim"
    steps: int = 3
    schedule: str = "exponential"
    sigma_min: float = 0.005
    sigma_max: float = 1.0
    eta: float = 1.0
    extra_steps: int = 0
    guidance: float = 1.0
    seed: int = 0   # evaluation seed k uses streams rooted at seed + k


@dataclass
class EvalSection:
    seeds: int = 10
    rollouts: int = 100
    n_samples: int = 2000   # gmm task: samples per seed
    workers: int = 1


@dataclass
class ExperimentConfig:
    task: str = "planar-push"
    seed: int = 0
    paths: PathsSection = field(default_factory=PathsSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- derived -------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def digest(self) -> str:
        # paths and worker counts cannot change any output, so they stay out
        d = {k: v for k, v in self.to_dict().items() if k != "paths"}
        d["eval"] = {k: v for k, v in d["eval"].items() if k != "workers"}
        return _digest(d)

    @property
    def lineage_digest(self) -> str:
        d = self.to_dict()
        return _digest({k: d[k] for k in ("task", "seed", "data", "model", "train")})

    @property
    def out_dir(self) -> Path:
        return Path(self.paths.out_dir)

    @property
    def dataset_path(self) -> Path:
        return Path(self.paths.dataset) if self.paths.dataset else self.out_dir / "dataset.jsonl"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.paths.checkpoint) if self.paths.checkpoint else self.out_dir / "model.ckpt"

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _build(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in raw.items():
        f = fields[name]
        sub = f"{where}.{name}" if where else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        else:
            kwargs[name] = _coerce(value, type(default), sub)
    return cls(**kwargs)


def _coerce(value, typ, where: str):
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is bool or isinstance(value, bool) or not isinstance(value, typ):
        raise ConfigError(f"{where}: expected {typ.__name__}, got {value!r}")
    return value


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.task in TASKS, f"task must be one of {TASKS}")
    need(cfg.data.n_traj >= 1, "data.n_traj must be >= 1")
    m = cfg.model
    need(m.kind in ("mlp", "transformer"), "model.kind must be mlp or transformer")
    need(m.width >= 1 and m.depth >= 0 and m.heads >= 1, "model sizes must be positive")
    need(m.width % m.heads == 0, "model.width must be divisible by model.heads")
    need(m.window >= 1 and m.goal_window >= 1, "model windows must be >= 1")
    need(m.sigma_data > 0, "model.sigma_data must be positive")
    t = cfg.train
    need(t.steps >= 0 and t.batch_size >= 1, "train.steps >= 0 and train.batch_size >= 1")
    need(t.lr > 0, "train.lr must be positive")
    need(0.0 <= t.goal_dropout <= 1.0, "train.goal_dropout must lie in [0, 1]")
    need(0.0 <= t.ema_decay < 1.0, "train.ema_decay must lie in [0, 1)")
    need(t.noise.family in ("log-logistic", "log-normal"), "train.noise.family must be log-logistic or log-normal")
    need(0 < t.noise.sigma_min < t.noise.sigma_max, "need 0 < train.noise.sigma_min < sigma_max")
    s = cfg.sampler
    need(s.family in SAMPLER_FAMILIES, f"sampler.family must be one of {SAMPLER_FAMILIES}")
    need(s.schedule in SCHEDULE_FAMILIES, f"sampler.schedule must be one of {SCHEDULE_FAMILIES}")
    need(s.steps >= 1, "sampler.steps must be >= 1")
    need(0 < s.sigma_min < s.sigma_max, "need 0 < sampler.sigma_min < sampler.sigma_max")
    need(0.0 <= s.eta <= 1.0, "sampler.eta must lie in [0, 1]")
    need(s.extra_steps >= 0, "sampler.extra_steps must be >= 0")
    e = cfg.eval
    need(e.seeds >= 1 and e.rollouts >= 1 and e.n_samples >= 1, "eval sizes must be >= 1")
    need(e.workers >= 1, "eval.workers must be >= 1")
    if cfg.task == "gmm":
        need(m.window == 1 and m.goal_window == 1, "the gmm task uses window = goal_window = 1")
    return cfg


def from_dict(raw: dict) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, raw, ""))


def load_config(path=None, env: dict | None = None) -> ExperimentConfig:
    """Read a YAML config (or defaults when ``path`` is None); path fields honour env overrides."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    cfg = from_dict(raw)
    env = os.environ if env is None else env
    for key, var in PATH_ENV.items():
        if env.get(var):
            setattr(cfg.paths, key, env[var])
    return cfg


def override(cfg: ExperimentConfig, section: str, **values) -> ExperimentConfig:
    """Copy of ``cfg`` with the non-None ``values`` set in ``section`` (top level if empty)."""
    d = cfg.to_dict()
    target = d[section] if section else d
    for k, v in values.items():
        if v is not None:
            if k not in target:
                raise ConfigError(f"unknown {section or 'config'} field {k!r}")
            target[k] = v
    return from_dict(d)
