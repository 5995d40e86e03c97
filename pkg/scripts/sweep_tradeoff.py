"""Bits-per-weight vs proxy-loss sweep on a synthetic layer.

Writes one CSV row per configuration (same columns as ``hvq quantize --csv``).

    python3 scripts/sweep_tradeoff.py --rows 256 --cols 128 --out sweep.csv
"""

import argparse
import csv
import sys

import numpy as np

from hvq import QuantConfig, bits_per_weight, hessian, quantize_matrix
from hvq.cli import CSV_HEADER


def synthetic_layer(rows, cols, samples, seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((rows, cols))
    X = rng.standard_normal((samples, cols)) * np.exp(0.8 * rng.standard_normal(cols))
    return W, hessian.finalize(hessian.accumulate_hessian(X), 0.01)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=256)
    p.add_argument("--cols", type=int, default=128)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--n", type=int, nargs="+", default=[4, 16, 64])
    p.add_argument("--k", type=int, default=256)
    p.add_argument("--int8", action="store_true")
    p.add_argument("--lowrank-r", type=int, default=0)
    p.add_argument("--fast-order", action="store_true")
    p.add_argument("--out", default="-")
    args = p.parse_args(argv)

    W, state = synthetic_layer(args.rows, args.cols, args.samples, args.seed)
    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(CSV_HEADER)
    for d in args.d:
        for n in args.n:
            cfg = QuantConfig(d=d, n=n, k=args.k, codebook_int8=args.int8, lowrank_r=args.lowrank_r,
                              seed=args.seed, fast_order=args.fast_order)
            layer = quantize_matrix(W, state, cfg)
            bpw = bits_per_weight(cfg, args.rows, args.cols).b_total
            writer.writerow([repr(bpw), repr(layer.meta["proxy_loss"]), d, n, args.k,
                             int(args.int8), args.lowrank_r, args.seed])
            fh.flush()
    if fh is not sys.stdout:
        fh.close()


if __name__ == "__main__":
    main()
