"""Write synthetic series as Jena-layout CSVs.

    python scripts/make_synthetic.py --kind two_tone --steps 2000 --channels 3 --out data/two_tone.csv
"""

import argparse

from mat_forecast.data import linear_series, two_tone_series, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--kind", choices=["two_tone", "linear"], default="two_tone")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--channels", type=int, default=3)
    ap.add_argument("--noise", type=float, default=0.1, help="two_tone only")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    if args.kind == "two_tone":
        ds = two_tone_series(args.steps, args.channels, noise=args.noise, seed=args.seed)
    else:
        ds = linear_series(args.steps, args.channels, seed=args.seed)
    write_csv(ds, args.out)
    print(f"wrote {args.channels} x {args.steps} {args.kind} series to {args.out}")


if __name__ == "__main__":
    main()
