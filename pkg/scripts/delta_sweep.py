"""Terminal consensus norm of estimated-mode control as delta_inf shrinks.

Every observer funnel is auto-designed from the shrunk delta, and the step
is chosen from the network's stability estimate, so small factors get slow.
"""
import argparse
import time
from dataclasses import replace

from khop_observer.config import load_config, to_scenario
from khop_observer.funnel import Funnel
from khop_observer.sim import build_network, run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="paper8")
    ap.add_argument("--factors", type=float, nargs="+", default=[1.0, 2.0, 5.0, 10.0])
    ap.add_argument("--margin", type=float, default=0.8, help="fraction of the stable step to use")
    args = ap.parse_args()

    cfg, base = load_config(args.config)
    sc = to_scenario(cfg, base)
    truth = run(replace(sc, control_mode="truth")).consensus_norm()
    print(f"truth mode: initial {truth[0]:.4e}  terminal {truth[-1]:.4e}")
    print(f"{'factor':>7} {'dt':>10} {'terminal':>11} {'ratio':>7} {'violations':>10} {'secs':>6}")
    for f in args.factors:
        d = sc.delta
        trial = replace(sc, delta=Funnel(d.rho0, d.rho_inf / f, d.decay), overrides={})
        dt = min(sc.dt, args.margin * build_network(trial).stable_dt())
        steps = int(round(sc.t_end / dt))
        dt = sc.t_end / steps
        trial = replace(trial, dt=dt, record_every=max(1, steps // 300))
        t0 = time.perf_counter()
        tr = run(trial)
        cn = tr.consensus_norm()
        print(f"{f:>7g} {dt:>10.3e} {cn[-1]:>11.4e} {cn[-1] / truth[-1]:>7.3f} "
              f"{tr.total_violations + tr.clamps:>10d} {time.perf_counter() - t0:>6.1f}")


if __name__ == "__main__":
    main()
