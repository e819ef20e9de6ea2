"""Theta-vs-candidate curves for the LQ problem under the optimal and a non-optimal control.

Writes tidy CSVs (tau, candidate, theta, se) to the chosen directory.
Usage: python3 scripts/vi_curve.py [--out plots] [--paths 20000]
"""

import argparse
from pathlib import Path

from fbmsmp.config import load_config
from fbmsmp.runner import emit_plot_data, run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="plots")
    ap.add_argument("--paths", type=int, default=20000)
    args = ap.parse_args()
    base = load_config(CONFIGS / "lq_basic.json").replace(m_paths=args.paths)
    for label, policy in (("optimal", "optimal"), ("zero", 0.0)):
        rec = run(base.replace(policy=policy), "verify-mp", write=False)
        path = emit_plot_data(rec, "vi", Path(args.out) / label)
        vi = rec.stats["variational_inequality"]
        print(f"{label:8s} min theta {vi['min_theta']:+.4f} at {vi['argmin']}  -> {path}")


if __name__ == "__main__":
    main()
