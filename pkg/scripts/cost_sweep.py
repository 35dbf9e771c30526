"""Per-schedule cost of every policy on each built-in trace kind."""

import argparse

from capsched.config import load_config
from capsched.sim import build_world, compare, train_model


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--kinds", nargs="+", default=["timer", "alternating", "poisson", "bursty-replicated"])
    args = ap.parse_args()

    base = load_config(None, [], seed=args.seed)
    model = train_model(base, build_world(base)).model
    print("trace              policy    schedules  ms_mean  inference/schedule  fast_path")
    for kind in args.kinds:
        runs = compare(load_config(None, [f"trace.kind={kind}"], seed=args.seed), model)
        for name, res in runs.items():
            r = res.report
            print(f"{kind:18} {name:8} {r['schedules']:10d} {r['schedule_ms_mean']:8.2f} "
                  f"{r['inference_per_schedule']:19.3f} {r['fast_path_fraction']:10.3f}")


if __name__ == "__main__":
    main()
