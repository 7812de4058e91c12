"""Observed convergence order of the fixed-step integrators.

Uses a 5-agent path with wide constant funnels so the transformed
corrections stay smooth; the ratio of successive terminal differences
for dt, dt/2, dt/4 should approach 2^p.
"""
import argparse

import numpy as np

from khop_observer.funnel import Funnel
from khop_observer.graph import Graph
from khop_observer.plant import AgentModel
from khop_observer.sim import Scenario, run

X0 = np.array([[-1.5, 1.0], [1.0, 1.5], [0.5, -1.0], [-1.0, -0.5], [1.5, 0.0]])


def terminal(integrator, dt, t_end):
    steps = int(round(t_end / dt))
    sc = Scenario(
        Graph.from_edges(5, [(i, i + 1) for i in range(1, 5)]), [AgentModel(i) for i in range(1, 6)],
        k=3, control_mode="truth",
        delta=Funnel.constant(400.0), theta=Funnel.constant(4000.0),
        rho=Funnel.constant(50.0), omega=Funnel.constant(500.0),
        x0=X0, xhat0=0.2, ghat0=-0.1, t_end=t_end, dt=dt, integrator=integrator, record_every=steps,
    )
    return run(sc).y[-1]


def main():
    ap = argparse.ArgumentParser(description="Richardson order estimates")
    ap.add_argument("--t-end", type=float, default=1.0)
    ap.add_argument("--levels", type=int, default=5)
    args = ap.parse_args()
    for integrator, dt0 in (("euler", 1e-2), ("rk4", 5e-2)):
        dts = [dt0 / 2 ** j for j in range(args.levels)]
        ys = [terminal(integrator, dt, args.t_end) for dt in dts]
        diffs = [np.linalg.norm(a - b) for a, b in zip(ys, ys[1:])]
        print(integrator)
        for dt, d0, d1 in zip(dts, diffs, diffs[1:]):
            print(f"  dt={dt:.4g}  |y(dt)-y(dt/2)|={d0:.3e}  order={np.log2(d0 / d1):.3f}")


if __name__ == "__main__":
    main()
