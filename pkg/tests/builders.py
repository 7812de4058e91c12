"""Scenario builders shared by the simulator and acceptance tests."""
from dataclasses import replace

import numpy as np

from conftest import path_graph
from khop_observer.config import load_config, to_scenario
from khop_observer.funnel import Funnel
from khop_observer.plant import AgentModel
from khop_observer.sim import Scenario, run


def bundled(name, **changes):
    cfg, base = load_config(name)
    return replace(to_scenario(cfg, base), **changes)


def smooth_path5(integrator="rk4", dt=1e-2, t_end=1.0, record_every=None):
    """Wide constant funnels keep the observer far from stiff, so step-size studies see the plant order."""
    x0 = np.array([[-1.5, 1.0], [1.0, 1.5], [0.5, -1.0], [-1.0, -0.5], [1.5, 0.0]])
    steps = int(round(t_end / dt))
    return Scenario(
        path_graph(5), [AgentModel(i) for i in range(1, 6)], k=3, control_mode="truth",
        delta=Funnel.constant(400.0), theta=Funnel.constant(4000.0),
        rho=Funnel.constant(50.0), omega=Funnel.constant(500.0),
        x0=x0, xhat0=0.2, ghat0=-0.1, t_end=t_end, dt=dt, integrator=integrator,
        record_every=record_every or steps,
    )


def terminal_state(sc):
    return run(sc).y[-1]


def richardson_order(integrator, dt, t_end=1.0):
    """log2 of successive terminal differences for dt, dt/2, dt/4."""
    y = [terminal_state(smooth_path5(integrator, dt / 2 ** j, t_end)) for j in range(3)]
    return float(np.log2(np.linalg.norm(y[0] - y[1]) / np.linalg.norm(y[1] - y[2])))
