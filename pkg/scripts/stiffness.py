"""Largest stable step per bundled scenario and integrator.

The transformed correction makes the observer stiff near the end of the
funnels; this prints the linearised estimate next to an empirical check at
a few multiples of it.
"""
import argparse
import logging
from dataclasses import replace

from khop_observer.config import bundled_names, load_config, to_scenario
from khop_observer.sim import NonFiniteStateError, build_network, run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*")
    ap.add_argument("--multiples", type=float, nargs="+", default=[0.5, 0.9, 1.5, 3.0])
    args = ap.parse_args()
    # steps above the estimate are deliberate here
    logging.getLogger("khop_observer.sim").setLevel(logging.ERROR)
    for name in args.names or bundled_names():
        cfg, base = load_config(name)
        sc = to_scenario(cfg, base)
        for integrator in ("euler", "rk4"):
            sc_i = replace(sc, integrator=integrator)
            est = build_network(sc_i).stable_dt()
            cells = []
            for m in args.multiples:
                dt = m * est
                steps = max(1, int(round(sc.t_end / dt)))
                try:
                    tr = run(replace(sc_i, dt=sc.t_end / steps, record_every=steps))
                    cells.append(f"{m:g}x:{'ok' if tr.funnel_satisfying else 'viol'}")
                except NonFiniteStateError:
                    cells.append(f"{m:g}x:nan")
            print(f"{name:>8} {integrator:>5} stable_dt={est:.4e}  " + "  ".join(cells))


if __name__ == "__main__":
    main()
