"""Solve the LQ Riccati system, report the residual gates and dump riccati.csv."""

import argparse

from mfparticles.cli import riccati_gate
from mfparticles.lq import solve_riccati, write_riccati_csv
from mfparticles.model import LqParams


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", type=int, default=1024)
    ap.add_argument("--N", type=int, nargs="+", default=[4, 8, 16, 32, 64])
    ap.add_argument("--out", default="riccati.csv")
    args = ap.parse_args()
    sol = solve_riccati(LqParams.acceptance(), args.grid)
    print(f"K(0)={sol.K[0]:.6f} L(0)={sol.L[0]:.6f} chi(0)={sol.chi[0]:.6f} int_0^T L={sol.Q[0]:.6f}")
    print(f"N * (c_N(0) - chi(0)) = {sol.params.sigma**2 * sol.Q[0]:.6f}")
    print(riccati_gate(sol))
    write_riccati_csv(sol, args.out, args.N)


if __name__ == "__main__":
    main()
