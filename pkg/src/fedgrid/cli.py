"""Command line entry point.

Exit codes: 0 success, 2 configuration or usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import SWEEP_BOUNDS, ExperimentConfig, bound_warnings, load_config, resolved_text
from .scenario import ConfigError, parse_kv_text

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _kv_pair(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _axis(text: str) -> tuple[str, int]:
    key, _, n = text.partition("=")
    try:
        return key.strip(), int(n) if n else 3
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected param=points, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgrid", description="Federated microgrid pricing experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, action="append", help="seed to run (repeatable); overrides seeds")
        p.add_argument("--out", help="output directory")
        p.add_argument("--algorithm", choices=("PFH", "FedAvg", "LocalOnly", "NoRL"))
        p.add_argument("--set", dest="overrides", type=_kv_pair, action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key (repeatable)")

    common(sub.add_parser("run", help="train and write metrics"))
    p = sub.add_parser("transfer", help="few-shot transfer from a saved hypernetwork state")
    common(p)
    p.add_argument("--state", required=True, help="state file, or the run directory holding state_seed<N>.bin")
    p = sub.add_parser("sweep-grid", help="grid sweep within the hyperparameter bounds")
    common(p)
    p.add_argument("--param", dest="axes", type=_axis, action="append", required=True,
                   metavar="NAME=POINTS", help="sweep axis, e.g. ppo.learning_rate=4")
    common(sub.add_parser("validate-config", help="check a config and print the resolved values"))
    return parser


def _overrides(args) -> dict[str, str]:
    kv = dict(args.overrides)
    if args.seed:
        kv["seeds"] = ",".join(str(s) for s in args.seed)
    if args.out:
        kv["output_dir"] = args.out
    if args.algorithm:
        kv["algorithm"] = args.algorithm
    return kv


def _file_kv(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return parse_kv_text(fh.read(), path)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    try:
        kv = {**_file_kv(args.config), **_overrides(args)}
        cfg: ExperimentConfig = load_config(None, kv)
        if args.command == "sweep-grid":
            unknown = [k for k, _ in args.axes if k not in SWEEP_BOUNDS]
            if unknown:
                raise ConfigError([f"unknown sweep parameter {k!r}" for k in unknown])
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    for warning in bound_warnings(cfg):
        print(f"warning: {warning}", file=sys.stderr)

    if args.command == "validate-config":
        sys.stdout.write(resolved_text(cfg))
        return EXIT_OK

    from . import experiment

    try:
        if args.command == "run":
            path = experiment.run_experiment(cfg)
        elif args.command == "transfer":
            path = experiment.run_transfer(cfg, args.state)
        else:
            path = experiment.sweep_grid(kv, dict(args.axes))
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
