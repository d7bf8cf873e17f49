"""Regenerate the checked-in range constants (src/hfpath/data/constants.csv).

    python scripts/oracle_constants.py [--reps 1000000] [--m 200] [--seed 20240611]
"""
import argparse
import time
from pathlib import Path

import numpy as np

from hfpath import __version__
from hfpath.asymptotics import range_moment_oracle, write_constants_csv

FIGURE_PS = np.round(np.arange(0.5, 4.0 + 1e-9, 0.25), 10)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--reps", type=int, default=1_000_000)
    ap.add_argument("--m", type=int, default=200)
    ap.add_argument("--seed", type=int, default=20240611)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src/hfpath/data/constants.csv"))
    args = ap.parse_args()

    ps = sorted(set(FIGURE_PS.tolist()) | set((2 * FIGURE_PS).tolist()))
    t0 = time.perf_counter()
    est = range_moment_oracle(ps, reps=args.reps, m=args.m, seed=args.seed)
    rows = [
        {"family": 3, "p": p, "value": e.value, "std_error": e.std_error, "method": e.method,
         "m": e.m, "reps": e.reps, "seed": args.seed}
        for p, e in sorted(est.items())
    ]
    write_constants_csv(rows, args.out,
                        header=f"hfpath {__version__} range oracle seed={args.seed} reps={args.reps} m={args.m}")
    print(f"wrote {len(rows)} rows to {args.out} in {time.perf_counter() - t0:.1f}s")
    for r in rows:
        print(f"p={r['p']:<5g} lambda3={r['value']:.6f} +- {r['std_error']:.2g}")


if __name__ == "__main__":
    main()
