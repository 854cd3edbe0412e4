"""Orchestration behind the command line: data, training, evaluation grids.

Every function here is deterministic given the config. Evaluation seeds
run independently (optionally on worker threads) and results are gathered
in seed order, so the written files never depend on scheduling.
"""

from __future__ import annotations

import csv
import io
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .denoiser import NetConfig, build_denoiser
from .denoiser.base import GuidanceError
from .envs import Normalizer, PlanarPushEnv, ScriptedController, StaticGmmTask, generate_play_data, rollout_policy
from .metrics import aggregate_seeds, energy_distance
from .rng import stream
from .samplers import GRID_FAMILIES, SamplerSpec, sample_action
from .schedules import FAMILIES as SCHEDULE_FAMILIES
from .schedules import TrainNoiseDist, build_schedule
from .tensor import Checkpoint, load_checkpoint
from .training import (
    TrainConfig,
    load_dataset,
    load_weights,
    play_batch_source,
    save_dataset,
    train,
)

ABLATION_STEPS = (3, 5, 10, 20, 50)
CFG_LAMBDAS = (0.0, 0.5, 1.0, 1.25, 2.0, 4.0)
STATE_DIM = ACTION_DIM = GOAL_DIM = 2


class ArtifactError(RuntimeError):
    """A referenced file is missing or unreadable."""


class LineageError(ValueError):
    """Artifacts from different training lineages would be mixed."""


# -- construction -----------------------------------------------------------

def net_config(model: dict) -> NetConfig:
    return NetConfig(kind=model["kind"], action_dim=ACTION_DIM, state_dim=STATE_DIM, goal_dim=GOAL_DIM,
                     window=model["window"], goal_window=model["goal_window"], width=model["width"],
                     depth=model["depth"], heads=model["heads"], attn_dropout=model["attn_dropout"],
                     resid_dropout=model["resid_dropout"])


def build_model(model: dict, seed: int, unconditional: bool):
    return build_denoiser(net_config(model), stream(seed, "init"), model["sigma_data"], unconditional)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(steps=t.steps, batch_size=t.batch_size, lr=t.lr, goal_dropout=t.goal_dropout,
                       noise=TrainNoiseDist(**asdict(t.noise)), sigma_data=cfg.model.sigma_data,
                       ema_decay=t.ema_decay, seed=cfg.seed)


def sampler_spec(cfg: ExperimentConfig, **changes) -> SamplerSpec:
    s = asdict(cfg.sampler)
    s.update(changes)
    sched = build_schedule(s["schedule"], s["steps"], s["sigma_min"], s["sigma_max"])
    return SamplerSpec(s["family"], sched, s["eta"], s["extra_steps"], s["guidance"], s["seed"])


def eval_seeds(cfg: ExperimentConfig) -> list[int]:
    return [cfg.sampler.seed + k for k in range(cfg.eval.seeds)]


# -- artifacts ----------------------------------------------------------------

def data_digest(cfg: ExperimentConfig) -> str:
    from .config import _digest
    d = cfg.to_dict()
    return _digest({k: d[k] for k in ("task", "seed", "data")})


def write_resolved(cfg: ExperimentConfig, name: str) -> Path:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.out_dir / f"{name}.resolved.yaml"
    path.write_text(cfg.dump(), encoding="utf-8")
    return path


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def write_csv(path: Path, header: list[str], rows: list[list], cfg: ExperimentConfig, notes=()) -> None:
    """CSV preceded by ``#`` lines carrying the config digest and seeds."""
    buf = io.StringIO()
    buf.write(f"# config_digest={cfg.digest}\n")
    buf.write(f"# lineage_digest={cfg.lineage_digest}\n")
    buf.write(f"# seed={cfg.seed} sampler_seed={cfg.sampler.seed}\n")
    for note in notes:
        buf.write(f"# {note}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


# -- commands ------------------------------------------------------------------

def gen_data(cfg: ExperimentConfig) -> Path:
    """Planar push: play trajectories as JSON lines. GMM: a reference sample CSV."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.task == "gmm":
        task = StaticGmmTask()
        acts, _, gi = task.sample(stream(cfg.seed, "data"), cfg.eval.n_samples)
        path = cfg.out_dir / "reference.csv"
        write_csv(path, ["goal", "a0", "a1"], [[int(g), a[0, 0], a[0, 1]] for g, a in zip(gi, acts)], cfg)
        write_resolved(cfg, "gen-data")
        return path
    data = generate_play_data(PlanarPushEnv(), ScriptedController(), cfg.data.n_traj, stream(cfg.seed, "data"))
    data.meta.update({"config_digest": cfg.digest, "data_digest": data_digest(cfg), "seed": cfg.seed})
    cfg.dataset_path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(cfg.dataset_path, data)
    write_resolved(cfg, "gen-data")
    return cfg.dataset_path


def run_train(cfg: ExperimentConfig, force: bool = False, on_step=None) -> Path:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(asdict(cfg.model), cfg.seed, cfg.train.goal_dropout > 0)
    extra = {}
    meta = {"task": cfg.task, "model": asdict(cfg.model), "lineage_digest": cfg.lineage_digest,
            "goal_dropout": cfg.train.goal_dropout}
    if cfg.task == "gmm":
        source = StaticGmmTask().batch_source()
    else:
        if not cfg.dataset_path.exists():
            raise ArtifactError(f"dataset {cfg.dataset_path} not found; run gen-data first")
        data = load_dataset(cfg.dataset_path)
        got = data.meta.get("data_digest")
        if got != data_digest(cfg):
            msg = f"dataset {cfg.dataset_path} was generated from a different task/seed/data config"
            if not force:
                raise LineageError(msg + " (pass --force to use it anyway)")
            _warn(msg)
        norm = Normalizer.fit(data)
        extra = {f"norm/{k}": v for k, v in norm.to_arrays().items()}
        source = play_batch_source(norm.apply(data), cfg.model.window, cfg.model.goal_window, pad_start=True)
    result = train(source, model, train_config(cfg), cfg.digest, meta, None, cfg.out_dir / "loss.csv", on_step)
    ckpt = result.checkpoint
    ckpt.arrays.update(extra)
    from .tensor import save_checkpoint
    save_checkpoint(cfg.checkpoint_path, ckpt)
    write_resolved(cfg, "train")
    return cfg.checkpoint_path


def load_trained(cfg: ExperimentConfig, force: bool = False):
    """``(model, normalizer or None, checkpoint)`` after lineage checks."""
    path = cfg.checkpoint_path
    if not path.exists():
        raise ArtifactError(f"checkpoint {path} not found; run train first")
    try:
        ckpt: Checkpoint = load_checkpoint(path)
    except (ValueError, OSError) as exc:
        raise ArtifactError(f"cannot read checkpoint {path}: {exc}") from exc
    lineage = ckpt.metadata.get("lineage_digest")
    if lineage != cfg.lineage_digest:
        msg = f"checkpoint {path} comes from a different training config"
        if not force:
            raise LineageError(msg + " (pass --force to evaluate it anyway)")
        _warn(msg)
    elif ckpt.config_digest != cfg.digest:
        _warn("config differs from the one used for training outside the training sections")
    if ckpt.metadata.get("task") != cfg.task:
        raise LineageError(f"checkpoint was trained on task {ckpt.metadata.get('task')!r}, config says {cfg.task!r}")
    model_cfg = ckpt.metadata["model"]
    model = build_model(model_cfg, cfg.seed, bool(ckpt.metadata.get("goal_dropout", 0) > 0))
    load_weights(model, ckpt, use_ema=True)
    norm = Normalizer.from_arrays(ckpt.group("norm")) if ckpt.group("norm") else None
    return model, norm, ckpt


def _map_seeds(fn, seeds, workers: int):
    if workers <= 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, seeds))


def evaluate_cell(cfg: ExperimentConfig, model, norm, spec: SamplerSpec) -> list[dict]:
    """One evaluation per seed with a fixed sampler spec."""
    if spec.guidance != 1.0 and not getattr(model, "supports_unconditional", False):
        raise GuidanceError("guidance != 1 needs a model trained with goal dropout")
    window, goal_window = cfg.model.window, cfg.model.goal_window
    if cfg.task == "gmm":
        task = StaticGmmTask()
        n = cfg.eval.n_samples

        def run(seed):
            gi = np.arange(n) % len(task.goal_codes)
            truth, goals, _ = task.sample(stream(seed, "eval", "truth"), n, gi)
            a = sample_action(model, None, goals, spec, (1, ACTION_DIM), stream(seed, "eval", "policy"))
            return {"seed": seed, "energy_distance": energy_distance(a.reshape(n, -1), truth.reshape(n, -1))}
    else:
        env = PlanarPushEnv()

        def run(seed):
            r = rollout_policy(env, model, norm, spec, cfg.eval.rollouts, seed, window, goal_window)
            return {"seed": seed, "result": r.result, "reward": r.reward, "goal": r.goal_index, "hits": r.target_hits}
    return _map_seeds(run, eval_seeds(cfg), cfg.eval.workers)


def cell_metrics(task: str, per_seed: list[dict]) -> dict[str, list[float]]:
    if task == "gmm":
        return {"energy_distance": [d["energy_distance"] for d in per_seed]}
    return {"result": [float(np.mean(d["result"])) for d in per_seed],
            "reward": [float(np.mean(d["reward"])) for d in per_seed]}


AGG_NOTE = "std is the population standard deviation over seeds"


def run_eval(cfg: ExperimentConfig, force: bool = False) -> tuple[Path, Path]:
    model, norm, _ = load_trained(cfg, force)
    per_seed = evaluate_cell(cfg, model, norm, sampler_spec(cfg))
    out = cfg.out_dir
    if cfg.task == "gmm":
        rows_path = out / "eval_seeds.csv"
        write_csv(rows_path, ["seed", "energy_distance"], [[d["seed"], d["energy_distance"]] for d in per_seed], cfg)
    else:
        rows_path = out / "eval_rollouts.csv"
        n_targets = per_seed[0]["hits"].shape[1]
        rows = [[d["seed"], i, int(d["goal"][i]), bool(d["result"][i]), bool(d["reward"][i])]
                + [bool(h) for h in d["hits"][i]]
                for d in per_seed for i in range(len(d["result"]))]
        header = ["seed", "rollout", "goal", "result", "reward"] + [f"hit_{k}" for k in range(n_targets)]
        write_csv(rows_path, header, rows, cfg)
    agg_rows = []
    for metric, values in cell_metrics(cfg.task, per_seed).items():
        a = aggregate_seeds(values)
        agg_rows.append([metric, a.mean, a.std, a.format()])
    agg_path = out / "eval_aggregate.csv"
    write_csv(agg_path, ["metric", "mean", "std", "formatted"], agg_rows, cfg, [AGG_NOTE])
    write_resolved(cfg, "eval")
    return rows_path, agg_path


def run_ablate_samplers(cfg: ExperimentConfig, force: bool = False,
                        families=GRID_FAMILIES, steps=ABLATION_STEPS) -> tuple[Path, Path]:
    """Family x step-count grid; cells are ``mean (± std)`` of the task's headline metric."""
    model, norm, _ = load_trained(cfg, force)
    headline = "energy_distance" if cfg.task == "gmm" else "result"
    long_rows, grid = [], {}
    for n in steps:
        for fam in families:
            per_seed = evaluate_cell(cfg, model, norm, sampler_spec(cfg, family=fam, steps=n))
            for metric, values in cell_metrics(cfg.task, per_seed).items():
                for seed, v in zip(eval_seeds(cfg), values):
                    long_rows.append([fam, n, seed, metric, v])
                if metric == headline:
                    grid[(n, fam)] = aggregate_seeds(values).format()
    out = cfg.out_dir
    long_path = out / "ablate_samplers_long.csv"
    write_csv(long_path, ["family", "steps", "seed", "metric", "value"], long_rows, cfg)
    grid_path = out / "ablate_samplers.csv"
    write_csv(grid_path, ["steps"] + list(families), [[n] + [grid[(n, f)] for f in families] for n in steps],
              cfg, [f"cells: {headline} mean (± std) over seeds", AGG_NOTE])
    write_resolved(cfg, "ablate-samplers")
    return grid_path, long_path


def run_ablate_schedules(cfg: ExperimentConfig, force: bool = False, schedules=SCHEDULE_FAMILIES) -> Path:
    model, norm, _ = load_trained(cfg, force)
    rows = []
    metrics = None
    for fam in schedules:
        per_seed = evaluate_cell(cfg, model, norm, sampler_spec(cfg, schedule=fam))
        m = cell_metrics(cfg.task, per_seed)
        metrics = list(m)
        rows.append([fam] + [aggregate_seeds(v).format() for v in m.values()])
    path = cfg.out_dir / "ablate_schedules.csv"
    write_csv(path, ["schedule"] + metrics, rows, cfg, [AGG_NOTE])
    write_resolved(cfg, "ablate-schedules")
    return path


def run_cfg_sweep(cfg: ExperimentConfig, force: bool = False, lambdas=CFG_LAMBDAS) -> Path:
    model, norm, _ = load_trained(cfg, force)
    if not model.supports_unconditional:
        raise GuidanceError("the cfg sweep needs a model trained with goal dropout")
    rows = []
    metrics = None
    for lam in lambdas:
        per_seed = evaluate_cell(cfg, model, norm, sampler_spec(cfg, guidance=float(lam)))
        m = cell_metrics(cfg.task, per_seed)
        metrics = list(m)
        rows.append([float(lam)] + [aggregate_seeds(v).format() for v in m.values()]
                    + [aggregate_seeds(v).mean for v in m.values()])
    path = cfg.out_dir / "cfg_sweep.csv"
    header = ["lambda"] + metrics + [f"{k}_mean" for k in metrics]
    write_csv(path, header, rows, cfg, [AGG_NOTE])
    write_resolved(cfg, "cfg-sweep")
    return path


def dump_schedule(cfg: ExperimentConfig) -> str:
    s = cfg.sampler
    levels = build_schedule(s.schedule, s.steps, s.sigma_min, s.sigma_max).with_terminal()
    lines = ["index,sigma"] + [f"{i},{repr(float(v))}" for i, v in enumerate(levels)]
    return "\n".join(lines) + "\n"


def check_task(cfg: ExperimentConfig) -> None:
    if cfg.task == "gmm" and cfg.model.kind == "transformer":
        raise ConfigError("the gmm task has no states; use model.kind: mlp")
