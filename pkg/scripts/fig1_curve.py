"""Print MSE against adaptation steps for a pair of sinusoid runs as a text table.

Usage: python3 scripts/fig1_curve.py [--k 10] runs/sinusoid_maml runs/sinusoid_bsmall
"""

import argparse
import csv
from pathlib import Path


def curve(run_dir: str, k: int) -> dict[int, tuple[float, float]]:
    with open(Path(run_dir) / "figure_mse_vs_steps.csv") as fh:
        return {int(r["steps"]): (float(r["mean"]), float(r["ci95"])) for r in csv.DictReader(fh) if int(r["K"]) == k}


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("runs", nargs="*", default=["runs/sinusoid_maml", "runs/sinusoid_bsmall"])
    p.add_argument("--k", type=int, default=10)
    args = p.parse_args()
    curves = [curve(d, args.k) for d in args.runs]
    print("steps" + "".join(f"{Path(d).name:>26}" for d in args.runs))
    for s in sorted(curves[0]):
        print(f"{s:>5}" + "".join(f"{c[s][0]:>16.4f} ± {c[s][1]:.4f}" for c in curves))


if __name__ == "__main__":
    main()
