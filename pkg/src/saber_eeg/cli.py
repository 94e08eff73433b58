"""Command-line entry point: ``saber-eeg <subcommand>``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a configuration
error (including an existing output directory without ``--force``).
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

from . import pipeline as pl
from .core import DatasetError, standard_layout
from .preprocess import ConfigError
from .simgen import (COUNTERBALANCE_ORDERS, PlanError, export_ground_truth, generate_trial_plan,
                     make_ground_truth, write_simulated_dataset)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    pass


def _prepare_output(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise UsageError(f"output {path} exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seed(value):
    if value is not None:
        return value
    env = os.environ.get(pl.SEED_ENV)
    if env is None:
        raise UsageError(f"a seed is required: pass --seed or set {pl.SEED_ENV}")
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"{pl.SEED_ENV}={env!r} is not an integer") from exc


def _config(args, inputs=None) -> pl.PipelineConfig:
    overrides = {"seed": getattr(args, "seed", None), "workers": getattr(args, "workers", None)}
    if inputs:
        overrides["inputs"] = [str(p) for p in inputs]
    if getattr(args, "out", None):
        overrides["output"] = str(args.out)
    if getattr(args, "no_plots", False):
        overrides["plots"] = False
    stages = {s: False for s in getattr(args, "disable", None) or []}
    if stages:
        overrides["stages"] = stages
    if getattr(args, "no_ocular", False):
        overrides["ocular"] = False
    return pl.load_config(getattr(args, "config", None), overrides)


# --------------------------------------------------------------------------
# Subcommands

def cmd_simulate(args) -> int:
    seed = _seed(args.seed)
    conditions = args.conditions.split(",") if args.conditions else None
    plan = generate_trial_plan(seed, blocks=args.blocks, trials_per_block=args.trials_per_block,
                               order_index=args.order, conditions=conditions)
    overrides = {} if args.alpha_amp is None else {"alpha_amp_uv": args.alpha_amp}
    layout = standard_layout()
    truth = make_ground_truth(layout, seed, **overrides)
    out = _prepare_output(args.out, args.force)
    n = write_simulated_dataset(plan, truth, layout, args.rate, out)
    export_ground_truth(truth, out / "truth.json")
    print(f"plan: seed {seed}, order {' '.join(c.short for c in plan.condition_order)}, "
          f"{plan.blocks} blocks x {plan.trials_per_block} trials per condition")
    for cond, s in plan.summary().items():
        print(f"  {cond:<18} {s['trials']:>5} trials  per bin {s['per_bin']}")
    print(f"wrote {n} events to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args, [args.dataset])
    cfg.validate(need_output=False)
    out = _prepare_output(args.out, args.force)
    report = pl.write_cleaned(args.dataset, cfg, out)
    print(f"cleaned {args.dataset}: {report['n_bad_channels']} bad channels interpolated")
    return EXIT_OK


def _single_stage(args, stage: str) -> int:
    cfg = _config(args, [args.dataset])
    toggles = {s: s == stage for s in ("erp", "lateralization", "iem")}
    cfg = pl.config_from_dict({**cfg.to_dict(), "stages": {**toggles, "stats": False}})
    cfg.validate(need_output=False)
    out = _prepare_output(args.out, args.force)
    name = Path(args.dataset).resolve().name
    res = pl.analyze_subject(args.dataset, name, cfg, pl.subject_seed(cfg.seed, 0), out,
                             pl.config_hash(cfg))
    res.save(out / f"{name}.npz")
    print(f"{stage} outputs written to {out}")
    return EXIT_OK


def cmd_erp(args) -> int:
    return _single_stage(args, "erp")


def cmd_lateralize(args) -> int:
    return _single_stage(args, "lateralization")


def cmd_iem(args) -> int:
    return _single_stage(args, "iem")


def cmd_stats(args) -> int:
    cfg = _config(args)
    if cfg.seed is None:
        raise ConfigError(f"a seed is required (config, --seed or {pl.SEED_ENV})")
    for p in args.results:
        if not Path(p).exists():
            raise ConfigError(f"result file {p} does not exist")
    out = _prepare_output(args.out, args.force)
    group = pl.run_stats_only(args.results, cfg, out)
    print(json.dumps(pl.round_floats(group), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args, args.input)
    cfg.validate()
    _prepare_output(cfg.output, args.force)
    report = pl.run_pipeline(cfg)
    print(f"report written to {Path(cfg.output) / 'report.json'} "
          f"({len(report['subjects'])} subject(s), config {report['config_hash'][:12]})")
    return EXIT_OK


def cmd_validate(args) -> int:
    violations = pl.validate_dataset(args.dataset)
    for v in violations:
        print(v)
    print(f"{len(violations)} violations")
    return EXIT_OK if not violations else EXIT_RUNTIME


# --------------------------------------------------------------------------
# Parser

def _add_common(p, out_required: bool = True):
    p.add_argument("--config", help="JSON pipeline configuration")
    p.add_argument("--seed", type=int, help=f"global seed (falls back to ${pl.SEED_ENV})")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--workers", type=int, help="worker threads (default: available CPUs)")
    p.add_argument("--no-ocular", action="store_true", help="skip ocular artifact removal")
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saber-eeg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic dataset and its ground truth")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--blocks", type=int, default=6)
    p.add_argument("--trials-per-block", type=int, default=102)
    p.add_argument("--rate", type=float, default=1000.0, help="sampling rate in Hz")
    p.add_argument("--conditions", help="comma-separated subset, e.g. SS,SM")
    p.add_argument("--order", type=int, choices=range(len(COUNTERBALANCE_ORDERS)),
                   help="counterbalancing order index")
    p.add_argument("--alpha-amp", type=float, help="tuned alpha amplitude in uV")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("preprocess", help="clean a raw dataset into a cleaned dataset")
    p.add_argument("dataset")
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)

    for name, func, text in (("erp", cmd_erp, "contralateral/ipsilateral ERPs"),
                             ("lateralize", cmd_lateralize, "alpha lateralization index"),
                             ("iem", cmd_iem, "inverted encoding model timecourses")):
        p = sub.add_parser(name, help=text)
        p.add_argument("dataset")
        _add_common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("stats", help="group statistics over per-subject result files")
    p.add_argument("results", nargs="+", help="subject .npz files written by erp/lateralize/iem/run")
    _add_common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("run", help="full pipeline over one or more datasets")
    p.add_argument("--input", action="append", help="dataset directory (repeatable)")
    _add_common(p, out_required=False)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--disable", action="append", choices=["erp", "lateralization", "iem", "stats"],
                   help="turn a stage off (repeatable)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check a dataset directory for violations")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, PlanError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, pl.PipelineError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
