"""Skewness of the one-dimensional density field against N and the tilt scale v.

Shows how slowly the field approaches normality. Prints one line per (N, v).
Usage: python3 scripts/c10_skew_scan.py [--envs 1000] [--seed 1]
"""

import argparse

from rwre_lab.env_models import nearest_neighbor
from rwre_lab.limit_estimators import field_gaussianity_test


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--envs", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--n-grid", type=int, nargs="+", default=[1000, 3000, 10000])
    ap.add_argument("--v", type=float, nargs="+", default=[0.5, 1.0])
    a = ap.parse_args()
    spec = nearest_neighbor(1)
    print(f"{'N':>7} {'v':>5} {'var':>9} {'target':>9} {'rel':>7} {'skew':>7} {'p_skew':>9} {'kurt':>7}")
    for N in a.n_grid:
        for v in a.v:
            r = field_gaussianity_test(spec, N, a.envs, a.seed, v=(v,))
            d = r.details
            print(f"{N:>7} {v:>5.2f} {r.estimate:>9.4f} {r.target:>9.4f} {d['relative_error']:>7.3f} "
                  f"{d['skew']:>7.3f} {d['p_skew']:>9.2e} {d['excess_kurtosis']:>7.3f}")


if __name__ == "__main__":
    main()
