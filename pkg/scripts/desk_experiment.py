"""Desk-scale comparison of MAT against the naive-repeat and linear baselines.

Defaults reproduce the two-tone run used by the acceptance suite
(2000 steps, M=3, L=T=96, n1=64, n2=32, D=16, H=2, 20 epochs, lr 1e-3).
Results go to <out>/desk_metrics.json and <out>/desk_metrics.csv.
"""

import argparse
import json
import sys
from pathlib import Path

from mat_forecast.data import prepare, two_tone_series
from mat_forecast.model import MatModel, ModelConfig
from mat_forecast.training import MetricsReport, TrainConfig, train, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--noise", type=float, default=0.1)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for seed in args.seeds:
        data = prepare(two_tone_series(args.steps, 3, noise=args.noise, seed=seed), 96, 96)
        model = MatModel.create(ModelConfig(M=3, L=96, T=96, n1=64, n2=32, D=16, N=1, H=2, seed=seed))
        log = lambda e, tr, va: print(f"  epoch {e + 1} train {tr:.5f} val {va:.5f}", file=sys.stderr)
        _, report = train(model, data, TrainConfig(epochs=args.epochs, lr=1e-3, seed=seed), log=log)
        b = report.baselines
        print(
            f"seed {seed}: MAT {report.mse:.5f}  naive {b['naive']['mse']:.5f}  "
            f"linear {b['linear']['mse']:.5f}  least-squares {b['linear_lstsq']['mse']:.5f}  "
            f"({report.wall_clock:.0f}s)"
        )
        reports.append(report)
    (out / "desk_metrics.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    write_csv(out / "desk_metrics.csv", MetricsReport.CSV_FIELDS, [r.csv_row() for r in reports])


if __name__ == "__main__":
    main()
