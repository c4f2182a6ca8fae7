"""Write every bundled transport kernel as a kernel file for a given grid.

    python3 scripts/dump_bundled_kernels.py --N 200 --out kernels/
"""

import argparse
from pathlib import Path

from perturbactrl.discretization import Grid1D
from perturbactrl.transport_lab import bundled_kernels, continuum_verdict, write_kernel


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--L", type=float, default=1.0)
    parser.add_argument("--N", type=int, default=200)
    parser.add_argument("--out", default="kernels")
    args = parser.parse_args()
    grid = Grid1D(args.L, args.N)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, kernel in bundled_kernels(grid).items():
        path = out / f"{name}.txt"
        write_kernel(path, kernel, grid)
        print(f"{name:14s} {continuum_verdict(kernel, grid):12s} {path}")


if __name__ == "__main__":
    main()
