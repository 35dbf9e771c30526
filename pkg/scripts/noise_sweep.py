"""Held-out median prediction error as the oracle noise level grows."""

import argparse

from capsched.config import load_config
from capsched.sim import build_world
from capsched.training import SamplingParams, train_pipeline


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--samples", type=int, default=2000)
    ap.add_argument("--sigma", type=float, nargs="+", default=[0.0, 0.025, 0.05, 0.1, 0.2])
    args = ap.parse_args()

    sampling = SamplingParams(n_samples=args.samples)
    print("sigma  median_error")
    for sigma in args.sigma:
        w = build_world(load_config(None, [f"oracle.noise_sigma={sigma}"], seed=args.seed))
        rep = train_pipeline(w.specs, w.oracle, args.seed, sampling).report
        print(f"{sigma:5.3f}  {rep.median_error:.4f}")


if __name__ == "__main__":
    main()
