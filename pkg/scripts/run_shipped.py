"""Run the main experiments on the shipped configs and print one line per run.

Usage: python3 scripts/run_shipped.py [--out runs]
"""

import argparse
from pathlib import Path

from fbmsmp.config import load_config
from fbmsmp.runner import run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

PLAN = [
    ("lq_basic", "sample-fbm"),
    ("lq_basic", "check-girsanov"),
    ("lq_basic", "verify-mp"),
    ("lq_basic", "scaling"),
    ("quadratic_phi", "duality"),
    ("linear_gaussian", "solve-bsde"),
    ("geometric", "simulate"),
    ("classical_h_half", "reduce-classical"),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    args = ap.parse_args()
    failed = 0
    for name, command in PLAN:
        rec = run(load_config(CONFIGS / f"{name}.json"), command, args.out)
        failed += not rec.passed
        bad = [k for k, v in rec.checks.items() if not v]
        print(f"{name:18s} {command:17s} {'PASS' if rec.passed else 'FAIL'}  {args.out}/{rec.fingerprint}"
              + (f"  failed: {bad}" if bad else ""))
    raise SystemExit(1 if failed else 0)


if __name__ == "__main__":
    main()
