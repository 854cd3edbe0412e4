"""``diffpolicy`` command line.

Exit codes: 0 success, 1 invalid config or arguments, 2 runtime failure
(missing artifact, lineage mismatch, training divergence), 3 selftest failure.
"""

from __future__ import annotations

import argparse
import sys

from . import experiment as ex
from .config import ConfigError, load_config, override
from .denoiser.base import GuidanceError
from .samplers import FAMILIES as SAMPLER_FAMILIES
from .samplers import SamplerError
from .schedules import FAMILIES as SCHEDULE_FAMILIES
from .schedules import ScheduleError
from .tensor import CheckpointError
from .training import DatasetError, TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3

EVAL_COMMANDS = ("eval", "ablate-samplers", "ablate-schedules", "cfg-sweep")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diffpolicy", description="Score-based diffusion policies on toy tasks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, sampler=False):
        sp.add_argument("--config", help="YAML experiment config (defaults if omitted)")
        sp.add_argument("--out", help="output directory (overrides paths.out_dir)")
        sp.add_argument("--seed", type=int, help="top-level seed, or the evaluation base seed for eval commands")
        if sampler:
            sp.add_argument("--force", action="store_true", help="use a checkpoint from a different lineage")
            sp.add_argument("--workers", type=int, help="threads over evaluation seeds")
            sp.add_argument("--sampler", choices=SAMPLER_FAMILIES)
            sp.add_argument("--steps", type=int)
            sp.add_argument("--sigma-min", type=float)
            sp.add_argument("--sigma-max", type=float)
            sp.add_argument("--schedule", choices=SCHEDULE_FAMILIES)
            sp.add_argument("--eta", type=float)
            sp.add_argument("--extra-steps", type=int)
            sp.add_argument("--cfg-lambda", type=float, help="guidance weight")
        return sp

    common(sub.add_parser("gen-data", help="generate play data (or a reference sample for gmm)"))
    tr = common(sub.add_parser("train", help="train a denoiser"))
    tr.add_argument("--force", action="store_true", help="train on a dataset from a different config")
    common(sub.add_parser("eval", help="evaluate a checkpoint over seeds"), sampler=True)
    common(sub.add_parser("ablate-samplers", help="sampler family x step count grid"), sampler=True)
    common(sub.add_parser("ablate-schedules", help="compare noise schedules"), sampler=True)
    common(sub.add_parser("cfg-sweep", help="sweep the guidance weight"), sampler=True)
    common(sub.add_parser("dump-schedule", help="print the sampling noise levels as CSV"), sampler=True)
    sub.add_parser("selftest", help="quick oracle checks of samplers and schedules")
    return p


def resolve_config(args):
    cfg = load_config(args.config)
    if args.out:
        cfg = override(cfg, "paths", out_dir=args.out)
    sampler_cmd = args.command in EVAL_COMMANDS or args.command == "dump-schedule"
    if sampler_cmd:
        cfg = override(cfg, "sampler", family=args.sampler, steps=args.steps, sigma_min=args.sigma_min,
                       sigma_max=args.sigma_max, schedule=args.schedule, eta=args.eta,
                       extra_steps=args.extra_steps, guidance=args.cfg_lambda, seed=args.seed)
        cfg = override(cfg, "eval", workers=args.workers)
    else:
        cfg = override(cfg, "", seed=args.seed)
    ex.check_task(cfg)
    return cfg


def selftest() -> bool:
    """Samplers against the Gaussian oracle and schedule invariants."""
    import numpy as np

    from .denoiser.oracles import GaussianOracle
    from .rng import stream
    from .samplers import SamplerSpec, sample_action
    from .schedules import build_schedule

    ok = True
    oracle = GaussianOracle(0.0, 1.0)
    for fam in ("heun", "dpm-2", "dpm++2m"):
        spec = SamplerSpec(fam, build_schedule("karras", 20, 0.002, 80.0))
        a = sample_action(oracle, None, None, spec, (1,), stream(0, "selftest", fam), n=4000)
        good = abs(a.mean()) < 0.08 and abs(a.std() - 1.0) < 0.08
        print(f"{'PASS' if good else 'FAIL'} {fam}: mean {a.mean():+.3f} std {a.std():.3f}")
        ok &= good
    for fam in SCHEDULE_FAMILIES:
        lv = build_schedule(fam, 10, 0.01, 10.0).levels
        good = abs(lv[0] - 10.0) < 1e-9 and abs(lv[-1] - 0.01) < 1e-9 and all(np.diff(lv) < 0)
        print(f"{'PASS' if good else 'FAIL'} schedule {fam}")
        ok &= good
    return bool(ok)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return EXIT_OK if selftest() else EXIT_SELFTEST
    try:
        cfg = resolve_config(args)
    except (ConfigError, ScheduleError, SamplerError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    force = getattr(args, "force", False)
    try:
        if args.command == "gen-data":
            print(ex.gen_data(cfg))
        elif args.command == "train":
            print(ex.run_train(cfg, force))
        elif args.command == "eval":
            for path in ex.run_eval(cfg, force):
                print(path)
        elif args.command == "ablate-samplers":
            for path in ex.run_ablate_samplers(cfg, force):
                print(path)
        elif args.command == "ablate-schedules":
            print(ex.run_ablate_schedules(cfg, force))
        elif args.command == "cfg-sweep":
            print(ex.run_cfg_sweep(cfg, force))
        elif args.command == "dump-schedule":
            sys.stdout.write(ex.dump_schedule(cfg))
    except (ScheduleError, SamplerError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ex.ArtifactError, ex.LineageError, CheckpointError, DatasetError, TrainingError,
            GuidanceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
