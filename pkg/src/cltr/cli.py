"""Command-line entry point: ``cltr {simulate,train,grid,toy,stats}``.

Exit codes: 0 success, 1 usage/config error, 2 runtime error,
3 every learning rate of a grid diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments
from .experiments import ConfigError, ExperimentConfig
from .optimization import AllDivergentError
from .simulation import ClickLogFormatError, read_log

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_ALL_DIVERGENT = 0, 1, 2, 3


def _eta(value: str):
    if value == "grid":
        return value
    try:
        eta = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError("eta must be a number or 'grid'") from None
    if eta <= 0:
        raise argparse.ArgumentTypeError("eta must be > 0")
    return eta


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cltr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="run a single seed")
    common.add_argument("--workers", type=int)
    common.add_argument("--gamma", type=float, nargs="+")
    common.add_argument("--method", nargs="+")
    common.add_argument("--optimizer", nargs="+")
    common.add_argument("--batch-size", type=int, nargs="+")
    common.add_argument("--eta", type=_eta)
    common.add_argument("--clicks", type=int)

    sub.add_parser("simulate", parents=[common], help="train the logging policy and write click logs")
    sub.add_parser("train", parents=[common], help="run method/optimizer/batch/gamma sweeps")
    sub.add_parser("grid", parents=[common], help="tune eta per method and optimizer")
    toy_p = sub.add_parser("toy", parents=[common], help="two-weight regression comparison")
    toy_p.add_argument("--etas", type=float, nargs="+")
    toy_p.add_argument("--seeds", type=int, nargs="+")

    stats = sub.add_parser("stats", help="M, M_bar and a 1/p histogram of a click log")
    stats.add_argument("log", type=Path)
    stats.add_argument("--out", help="also write stats.json here")
    return parser


def _config(args) -> ExperimentConfig:
    raw = {}
    if args.config is not None:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config.exists() else None
        if raw is None:
            raise ConfigError(f"config file not found: {args.config}")
    overrides = {
        "out": args.out,
        "workers": args.workers,
        "gammas": args.gamma,
        "methods": args.method,
        "optimizers": args.optimizer,
        "batch_sizes": args.batch_size,
        "eta": args.eta,
        "n_clicks": args.clicks,
        "seeds": [args.seed] if args.seed is not None else None,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "etas", None) or getattr(args, "seeds", None):
        toy_cfg = dict(raw.get("toy", {}))
        if args.etas:
            toy_cfg["etas"] = args.etas
        if args.seeds:
            toy_cfg["seeds"] = args.seeds
        raw["toy"] = toy_cfg
    return ExperimentConfig.from_dict(raw)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    if args.command == "stats":
        try:
            report = experiments.log_report(read_log(args.log))
        except FileNotFoundError:
            print(f"error: no such file: {args.log}", file=sys.stderr)
            return EXIT_USAGE
        except (ClickLogFormatError, ValueError) as exc:
            print(f"error: {args.log}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(experiments.format_log_report(report))
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "stats.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        return EXIT_OK

    try:
        cfg = _config(args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "simulate":
            report = experiments.cmd_simulate(cfg)
            for row in report["rows"]:
                print(f"gamma={row['gamma']} seed={row['seed']} M={row['M']:.6g} M_bar={row['M_bar']:.6g}")
        elif args.command == "train":
            summary = experiments.cmd_train(cfg)
            print(experiments.format_tables(summary))
            if any(r["status"] == "failed" for r in summary["cells"]):
                return EXIT_RUNTIME
        elif args.command == "grid":
            report = experiments.cmd_grid(cfg)
            for row in report["cells"]:
                print(f"{row['method']:>14} {row['optimizer']:>8} b={row['batch_size']} "
                      f"gamma={row['gamma']} seed={row['seed']} eta={row['selected_eta']}")
        elif args.command == "toy":
            summary = experiments.cmd_toy(cfg)
            for row in summary["rows"]:
                print(f"{row['method']:>14} eta={row['eta']:<8g} mean_final_distance={row['mean_final_distance']}")
    except AllDivergentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALL_DIVERGENT
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"outputs written to {cfg.out}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
