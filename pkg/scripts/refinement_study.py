"""Fine-grid bias of sample-only block ranges against bridge envelopes.

    python scripts/refinement_study.py [--n 64] [--ms 2,10,50,200] [--p 2] [--reps 1000]
"""
import argparse

from hfpath.experiment import DEFAULT_SEED, refinement_study
from hfpath.model import ModelSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--ms", default="2,10,50,200")
    ap.add_argument("--p", type=float, default=2.0)
    ap.add_argument("--reps", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=DEFAULT_SEED)
    ap.add_argument("--out", default=None, help="optional CSV path")
    args = ap.parse_args()

    ms = [int(v) for v in args.ms.split(",")]
    rep = refinement_study(ModelSpec(), args.n, ms, p=args.p, reps=args.reps, seed=args.seed)
    print(f"{'m':>6} {'target':>9} {'envelope':>9} {'samples':>9} {'rel bias':>9}")
    for r in rep.rows:
        print(f"{r['m_fine']:>6} {r['target']:9.4f} {r['mean_envelope']:9.4f} "
              f"{r['mean_samples']:9.4f} {r['rel_bias_samples']:9.4f}")
    if args.out:
        rep.to_csv(args.out)


if __name__ == "__main__":
    main()
