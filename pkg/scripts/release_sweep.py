"""Sweep the release duration with and without migration on the bursty trace.

Prints how many re-activations were served by logical starts versus real cold
starts, plus the resulting violation rate and density.
"""

import argparse

from capsched.config import load_config
from capsched.sim import build_world, simulate, train_model


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--release", type=float, nargs="+", default=[15, 30, 45, 60])
    args = ap.parse_args()

    base = load_config(None, [], seed=args.seed)
    world = build_world(base)
    model = train_model(base, world).model
    print("release_s  migration  reactivations  logical_frac  real  migrations  violation")
    for rel in args.release:
        for mig in (False, True):
            cfg = load_config(None, [f"scaling.release_duration_s={rel}", f"scaling.migration={str(mig).lower()}"],
                              seed=args.seed)
            r = simulate(cfg, world, model=model).report
            cs = r["cold_starts"]
            print(f"{rel:9.0f}  {str(mig):9}  {cs['reactivations']:13d}  "
                  f"{cs['logical_fraction_of_reactivations']:12.3f}  {cs['reactivation_real']:4d}  "
                  f"{cs['migrations']:10d}  {r['qos_violation_rate']:9.4f}")


if __name__ == "__main__":
    main()
