"""Run bundled scenarios and print their summaries.

    python3 scripts/run_scenarios.py                 # every bundled scenario
    python3 scripts/run_scenarios.py paper8 --out runs --profile paper
"""
import argparse
import time
from pathlib import Path

from khop_observer.config import bundled_names, load_config, to_scenario
from khop_observer.sim import run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", help="bundled scenario names (default: all)")
    ap.add_argument("--profile", choices=("paper", "desk"))
    ap.add_argument("--out", help="write trajectory and assertion CSVs under this directory")
    args = ap.parse_args()

    for name in args.names or bundled_names():
        cfg, base = load_config(name, profile=args.profile)
        t0 = time.perf_counter()
        tr = run(to_scenario(cfg, base))
        print(f"== {name} ({time.perf_counter() - t0:.1f}s)")
        print(tr.summary(), end="")
        if args.out:
            d = Path(args.out) / name
            d.mkdir(parents=True, exist_ok=True)
            tr.write_csv(d / "trajectory.csv")
            tr.write_assertions(d / "assertions.csv")


if __name__ == "__main__":
    main()
