"""Compare greedy Hessian-guided quantization against round-to-nearest codebooks.

Prints per-trial proxy losses and a win count.

    python3 scripts/compare_rtn.py --trials 10
"""

import argparse

import numpy as np

from hvq import QuantConfig, hessian, quantizer


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--k", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fast-order", action="store_true")
    args = p.parse_args(argv)

    cfg = QuantConfig(d=args.d, n=args.n, k=args.k, fast_order=args.fast_order)
    wins = 0
    print("trial,hvq_loss,rtn_loss,ratio")
    for t in range(args.trials):
        rng = np.random.default_rng(args.seed + t)
        m = args.size
        W = rng.standard_normal((m, m))
        X = rng.standard_normal((2 * m, m)) * np.exp(0.8 * rng.standard_normal(m))
        state = hessian.finalize(hessian.accumulate_hessian(X), cfg.damping_rel)
        ours = quantizer.quantize_matrix(W, state, cfg).meta["proxy_loss"]
        rtn = quantizer.proxy_loss(W, quantizer.rtn_baseline(W, state, cfg), state)
        wins += ours < rtn
        print(f"{t},{ours:.6g},{rtn:.6g},{ours / rtn:.4f}")
    print(f"# wins {wins}/{args.trials}")


if __name__ == "__main__":
    main()
