"""Sweep a config over N and seeds and print the fitted log-log rates.

    python3 scripts/rate_study.py configs/lsmc.json --out runs/lsmc
"""

import argparse
import json
from pathlib import Path

from mfparticles.cli import load_config, run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--out", default="runs/rate_study")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    cfg = load_config(args.config)
    code = run_sweep(cfg, args.out, threads=args.threads)
    rates = json.loads((Path(args.out) / "rates.json").read_text())
    print(f"{'method':<10}{'column':<15}{'slope':>10}{'r2':>10}")
    for method, cols in rates.items():
        for col, fit in cols.items():
            if "slope" in fit:
                print(f"{method:<10}{col:<15}{fit['slope']:>10.4f}{fit['r2']:>10.5f}")
    raise SystemExit(code)


if __name__ == "__main__":
    main()
