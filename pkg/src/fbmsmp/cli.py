"""Command line entry point: ``fbmsmp <command> [--config FILE] [overrides]``.

Exit status: 0 if every check passed, 1 if any check failed, 2 on bad input.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, ExperimentConfig, load_config
from .runner import COMMANDS, run

_HELP = {
    "sample-fbm": "sample fBm paths and compare the empirical covariance with R_H",
    "check-girsanov": "Monte Carlo checks of the Girsanov density and identity",
    "simulate": "simulate the transformed state under a policy",
    "cost": "estimate the cost of a policy",
    "solve-bsde": "solve the first and second order adjoint equations",
    "verify-mp": "variational inequality and duality checks for a candidate control",
    "scaling": "spike-variation scaling experiment",
    "duality": "first and second order duality identities",
    "reduce-classical": "compare with the two-driver adjoint at H = 1/2",
}


def _global_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--out", default="runs", help="output root (default: runs)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--paths", type=int, help="override the number of Monte Carlo paths")
    p.add_argument("--steps", type=int, help="override the number of time steps")
    p.add_argument("--problem", help="built-in problem (when no config is given, or to override it)")
    p.add_argument("--policy", help="control: 'optimal' or a constant")
    p.add_argument("--hurst", type=float, help="override the Hurst parameter")
    p.add_argument("--sigma", type=float, help="override the fBm volatility")
    p.add_argument("--quiet", action="store_true", help="print only the report path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbmsmp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _global_args(sub.add_parser(name, help=_HELP[name]))
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config:
        raw = load_config(args.config).to_dict()
    elif args.problem:
        raw = {"problem": args.problem}
    else:
        raise ConfigError("<root>: give --config or --problem")
    if args.problem:
        if args.config and args.problem != raw["problem"]:
            raw["params"] = {}
        raw["problem"] = args.problem
    params = dict(raw.get("params", {}))
    if args.hurst is not None:
        params["h"] = args.hurst
    if args.sigma is not None:
        params["sigma"] = args.sigma
    raw["params"] = params
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.paths is not None:
        raw["m_paths"] = args.paths
    if args.steps is not None:
        raw["n_steps"] = args.steps
    if args.policy is not None:
        try:
            raw["policy"] = float(args.policy)
        except ValueError:
            raw["policy"] = args.policy
    return ExperimentConfig.from_dict(raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    rec = run(cfg, args.command, args.out)
    if args.quiet:
        print(f"{args.out}/{rec.fingerprint}/report.json")
    else:
        print(json.dumps({"fingerprint": rec.fingerprint, "command": rec.command, "checks": rec.checks,
                          "passed": rec.passed}, indent=2))
    return 0 if rec.passed else 1


if __name__ == "__main__":
    sys.exit(main())
