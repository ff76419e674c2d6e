"""Operator surface: train / eval / export-awareness / verify.

Exit codes: 0 success, 2 configuration error, 3 numeric abort,
4 verification failure (1 is left to unexpected crashes).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import verify
from .config import config_keys, parse_config
from .errors import ConfigurationError, ContractViolation, NumericError
from .export import export_awareness
from .trainer import evaluate, run_training
from .diffcore import ParameterSet

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigurationError(f"--seed expects N[,N...], got {text!r}") from None


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="config file path")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="teamaware",
        description=__doc__,
        epilog="config keys: " + ", ".join(config_keys()),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop")
    _add_common(p_train)
    p_train.add_argument("--seed", type=str, default=None,
                         help="master seed(s), N or N,N,... (multi-seed batch)")
    p_train.add_argument("--out", type=Path, default=Path("runs/run"),
                         help="output directory (per-seed subdirs for batches)")
    p_train.add_argument("--progress", action="store_true",
                         help="print one line per evaluation")

    p_eval = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument("--episodes", type=int, default=20)
    p_eval.add_argument("--seed", type=int, default=0)

    p_exp = sub.add_parser("export-awareness",
                           help="dump awareness embeddings and variance series")
    _add_common(p_exp)
    p_exp.add_argument("--checkpoint", type=Path, required=True)
    p_exp.add_argument("--episodes", type=int, default=5)
    p_exp.add_argument("--seed", type=int, default=0)
    p_exp.add_argument("--out", type=Path, default=Path("runs/awareness"))

    p_ver = sub.add_parser("verify", help="run a property-verification suite")
    p_ver.add_argument("suite", choices=sorted(verify.SUITES) + ["all"])
    p_ver.add_argument("--inject-fault", action="store_true",
                       help="corrupt a backward rule to demo the negative control")
    return parser


def cmd_train(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    seeds = _parse_seeds(args.seed) if args.seed is not None else [cfg.train.seed]
    multi = len(seeds) > 1
    for seed in seeds:
        import dataclasses
        run_cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, seed=seed))
        out = args.out / f"seed_{seed:04d}" if multi else args.out
        summary = run_training(run_cfg, out, progress=args.progress)
        print(f"run complete: out={summary['out_dir']} "
              f"env_steps={summary['env_steps']} "
              f"final_eval_mean={summary['final_eval_mean']!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    params = ParameterSet.load(args.checkpoint)
    mean, std, returns = evaluate(params, cfg, args.episodes,
                                  np.random.SeedSequence(args.seed))
    print(f"eval episodes={args.episodes} mean_return={mean!r} std={std!r}")
    for k, r in enumerate(returns):
        print(f"episode {k}: return={r!r}")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    params = ParameterSet.load(args.checkpoint)
    result = export_awareness(params, cfg, args.episodes, args.out, seed=args.seed)
    print(f"export complete: records={result['records']} "
          f"timesteps={result['timesteps']} dump={result['dump']}")
    print(f"frac_self_variance_is_min={result['frac_self_variance_is_min']}")
    return EXIT_OK


def cmd_verify(args) -> int:
    names = sorted(verify.SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in names:
        kwargs = {}
        if name == "gradcheck" and args.inject_fault:
            kwargs["inject_fault"] = True
        report = verify.run_suite(name, **kwargs)
        print(report.format())
        ok = ok and report.passed
    return EXIT_OK if ok else EXIT_VERIFY


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"train": cmd_train, "eval": cmd_eval,
                "export-awareness": cmd_export, "verify": cmd_verify}
    try:
        return handlers[args.command](args)
    except (ConfigurationError, ContractViolation) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
