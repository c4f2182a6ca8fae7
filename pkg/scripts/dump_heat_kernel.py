"""Write the heat kernel k(t, s) of the Dirac moment solution as a CSV table.

    python3 scripts/dump_heat_kernel.py --S 1.8 --T 0.5 --out kernel.csv
"""

import argparse

import numpy as np

from perturbactrl.heat_lab import dirac_heat_control, dump_kernel_csv


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--S", type=float, default=1.8, help="half-width of the wave interval")
    parser.add_argument("--T", type=float, default=0.5, help="heat control horizon")
    parser.add_argument("--n-modes", type=int, default=16)
    parser.add_argument("--times", type=int, default=51)
    parser.add_argument("--points", type=int, default=101)
    parser.add_argument("--out", default="heat_kernel.csv")
    args = parser.parse_args()
    heat = dirac_heat_control(args.S, args.T, n_modes=args.n_modes)
    print(f"max moment residual {heat.moment_residuals.max():.3e}")
    t = np.linspace(0.0, args.T, args.times)
    s = np.linspace(-args.S, args.S, args.points)
    dump_kernel_csv(args.out, heat, t, s)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
