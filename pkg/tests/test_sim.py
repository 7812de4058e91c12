import math
from dataclasses import replace

import numpy as np
import pytest

from builders import bundled, richardson_order, smooth_path5
from conftest import path_graph
from khop_observer.funnel import Funnel, InfeasibleInitializationError
from khop_observer.graph import EXTENDED, Graph
from khop_observer.observer import ObserverVariant
from khop_observer.plant import AgentModel, Drift, InputMap, make_disturbance
from khop_observer.sim import (NonFiniteStateError, Scenario, build_network, derivative,
                               finite_difference_audit, reference_derivative, run, step)


@pytest.fixture(scope="module")
def paper8_traj():
    return run(bundled("paper8"))


def hetero_scenario(**kw):
    """Mixed dimensions and dynamics on a 6-node graph, extended neighborhoods, no control."""
    g = Graph.from_edges(6, [(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (2, 5)])
    agents = [
        AgentModel(1, 1, Drift("linear", -0.5)),
        AgentModel(2, 2, Drift("paper"), InputMap("tanh")),
        AgentModel(3, 3, Drift("tanh", 0.8), disturbance=make_disturbance("sinusoid", 3, 3, 6, 0.1, 2.0)),
        AgentModel(4, 2, Drift("paper"), disturbance=make_disturbance("random", 2, 4, 6, 0.2, 1.0, seed=5)),
        AgentModel(5, 1, Drift("zero")),
        AgentModel(6, 2, Drift("linear", -1.0)),
    ]
    x0 = [np.array([0.5]), np.array([-0.4, 0.3]), np.array([0.2, 0.1, -0.3]),
          np.array([0.6, -0.6]), np.array([0.1]), np.array([-0.2, 0.4])]
    base = dict(k=2, mode=EXTENDED, control_mode="off", x0=x0, t_end=1.0, record_every=50,
                delta=Funnel.from_gap(10.0, 0.2, 3.0), theta=Funnel.from_gap(50.0, 1.0, 3.0))
    base.update(kw)
    return Scenario(g, agents, **base)


def test_network_layout_paper8():
    net = build_network(bundled("paper8"))
    assert len(net.slots) == 32 and net.n_rows == 64 and net.nx == 16
    targets = [s.target for s in net.slots]
    assert targets == sorted(targets)
    for tgt in net.matrices:
        ests = [s.estimator for s in net.slot_rows(tgt)]
        assert ests == sorted(ests)


def test_stable_dt_paper8():
    net = build_network(bundled("paper8"))
    assert net.stable_dt() == pytest.approx(1.2774e-4, rel=1e-3)


@pytest.mark.parametrize("make", [lambda: bundled("paper8"), lambda: bundled("minimal"),
                                  lambda: bundled("nodrift"), hetero_scenario,
                                  lambda: hetero_scenario(variant=ObserverVariant.NO_INPUT_OBSERVER)])
def test_kernel_matches_reference(make, rng):
    net = build_network(make())
    for t in (0.0, 0.37, 2.0):
        y = net.y0 + rng.normal(scale=0.02, size=net.size)
        a = derivative(net, t, y)[0]
        b = reference_derivative(net, t, y)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12 * np.max(np.abs(b)))


def test_kernel_reads_only_neighbors():
    """Peer rows of every slot belong to 1-hop neighbors of its estimator and estimate the same target."""
    for sc in (bundled("paper8"), hetero_scenario()):
        net = build_network(sc)
        K = net.kernel
        g = sc.comm_graph
        for r in range(net.n_rows):
            s = net.slots[net.row_slot[r]]
            for p in range(K.peer_ptr[r], K.peer_ptr[r + 1]):
                peer = net.slots[net.row_slot[K.peer_idx[p]]]
                assert peer.estimator in g.neighbors(s.estimator)
                assert peer.target == s.target
                assert net.row_comp[K.peer_idx[p]] == net.row_comp[r]
            if K.row_h[r]:
                near = g.neighbors(s.target) & (g.neighbors(s.estimator) | {s.estimator})
                assert near


def test_stationary_without_disagreement():
    g = path_graph(4)
    agents = [AgentModel(i, 2, Drift("paper")) for i in range(1, 5)]
    sc = Scenario(g, agents, k=2, control_mode="off", variant=ObserverVariant.NO_DRIFT_NO_INPUT,
                  x0=[np.zeros(2)] * 4, xhat0=0.0, t_end=0.5, record_every=100,
                  rho=Funnel.constant(1.0), delta=Funnel.constant(5.0))
    tr = run(sc)
    assert np.all(tr.xhat == 0) and np.all(tr.x == 0)
    sc = replace(sc, x0=[np.array([1.0, 1.0])] * 4, xhat0=np.array([1.0, 1.0]))
    net = build_network(sc)
    dy = derivative(net, 0.0, net.y0)[0]
    np.testing.assert_allclose(dy[:net.nx], np.tile([math.tanh(1.0), 0.0], 4))
    # estimates see the truth only through the disagreement, which starts at zero here
    assert np.all(dy[net.nx:net.nx + net.n_rows] == 0)


def test_step_matches_run():
    sc = smooth_path5("rk4", 1e-2, 0.05, record_every=1)
    net = build_network(sc)
    tr = run(net)
    y = net.y0
    for n in range(5):
        y = step(net, y, n * sc.dt)
    np.testing.assert_array_equal(y, tr.y[-1])


def test_richardson_euler():
    assert abs(richardson_order("euler", 1e-2) - 1.0) <= 0.3


def test_richardson_rk4():
    assert abs(richardson_order("rk4", 2e-2) - 4.0) <= 0.3


def test_paper8_no_violations(paper8_traj):
    tr = paper8_traj
    assert tr.status == "ok"
    assert tr.total_violations == 0 and tr.clamps == 0
    assert np.all(tr.margins > 0)
    assert np.all(np.abs(tr.xi) < tr.rho) and np.all(np.abs(tr.x_tilde) < tr.delta)
    assert np.all(np.abs(tr.mu) < tr.omega) and np.all(np.abs(tr.g_tilde) < tr.theta)


def test_stacked_residuals(paper8_traj):
    rx, rg = paper8_traj.stacked_residuals()
    assert rx.max() <= 1e-10 and rg.max() <= 1e-10


def test_bound_chain(paper8_traj):
    tr = paper8_traj
    net = tr.network
    for tgt, dm in net.matrices.items():
        rows = np.concatenate([np.arange(s.row, s.row + s.dim) for s in net.slot_rows(tgt)])
        lhs = np.linalg.norm(tr.x_tilde[:, rows], axis=1)
        rhs = np.linalg.norm(tr.xi[:, rows], axis=1) / dm.lambda_min
        assert np.all(lhs <= rhs * (1 + 1e-12) + 1e-15)


def test_input_derivative_bounded(paper8_traj):
    tr = paper8_traj
    du = np.diff(tr.u, axis=0) / np.diff(tr.t)[:, None]
    assert np.all(np.isfinite(du)) and np.abs(du).max() < 100.0
    assert np.abs(tr.u).max() <= 2.0 * 4


def test_heterogeneous_extended_run():
    tr = run(hetero_scenario())
    assert tr.funnel_satisfying
    rx, rg = tr.stacked_residuals()
    assert rx.max() <= 1e-10 and rg.max() <= 1e-10
    assert np.all(np.isnan(tr.consensus_norm()))


def test_infeasible_explicit_rho():
    sc = bundled("paper8", overrides={4: {"rho": Funnel.from_gap(0.5, 0.02, 5.0)}})
    with pytest.raises(InfeasibleInitializationError, match="xi a"):
        build_network(sc)


def test_infeasible_auto_names_required_delta():
    sc = bundled("paper8", x0=np.full((8, 2), 4.0))
    with pytest.raises(InfeasibleInitializationError, match="needs delta") as err:
        build_network(sc)
    assert err.value.required > 14.077


def test_missing_estimate_for_task_edge():
    g = path_graph(5)
    task = Graph.from_edges(5, [(1, 5), (1, 2), (2, 3), (3, 4)])
    sc = Scenario(g, [AgentModel(i) for i in range(1, 6)], k=3, task_graph=task,
                  x0=np.zeros((5, 2)), t_end=0.1)
    with pytest.raises(ValueError, match="outside its 3-hop"):
        build_network(sc)


def test_nonfinite_abort():
    g = path_graph(3)
    agents = [AgentModel(i, 1, Drift("linear", 800.0)) for i in range(1, 4)]
    sc = Scenario(g, agents, k=2, control_mode="off", x0=[np.array([1.0])] * 3, integrator="euler",
                  dt=1e-2, t_end=50.0, rho=Funnel.constant(1e99), omega=Funnel.constant(1e99),
                  delta=Funnel.constant(1e100), theta=Funnel.constant(1e100), xhat0=1.0)
    with pytest.raises(NonFiniteStateError, match="non-finite value at step"):
        run(sc)


def test_scenario_validation():
    g = path_graph(3)
    agents = [AgentModel(i) for i in range(1, 4)]
    with pytest.raises(ValueError):
        Scenario(Graph(3, frozenset({(1, 2)})), agents)
    with pytest.raises(ValueError):
        Scenario(g, agents[:2])
    with pytest.raises(ValueError):
        Scenario(g, agents, dt=0.0)
    with pytest.raises(ValueError):
        Scenario(g, agents, integrator="rk45")


def test_determinism(tmp_path):
    sc = bundled("minimal", t_end=0.5)
    a, b = run(sc), run(sc)
    a.write_csv(tmp_path / "a.csv")
    b.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_csv_schema(tmp_path, paper8_traj):
    paper8_traj.write_csv(tmp_path / "t.csv")
    paper8_traj.write_assertions(tmp_path / "a.csv")
    header = (tmp_path / "t.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "t"
    assert "a1.self.x.1" in header and "a4.self.g.2" in header
    assert "a1.t4.xhat.1" in header and "a7.t4.omega.2" in header
    assert header[-1] == "net.all.consensus.norm"
    assert all(len(h.split(".")) == 4 for h in header[1:])
    data = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1)
    assert data.shape == (len(paper8_traj.t), len(header))
    ah = (tmp_path / "a.csv").read_text().splitlines()[0].split(",")
    assert ah[:2] == ["t", "margin_xi"] and "residual_mu" in ah


def test_summary_text(paper8_traj):
    text = paper8_traj.summary()
    assert "violations xi: 0" in text and "funnel satisfying: yes" in text


def test_audit_trivial():
    g = path_graph(4)
    sc = Scenario(g, [AgentModel(i, 2, Drift("zero")) for i in range(1, 5)], k=2, control_mode="off",
                  x0=[np.zeros(2)] * 4, t_end=0.1, record_every=1, rho=Funnel.constant(1.0),
                  delta=Funnel.constant(5.0))
    rep = finite_difference_audit(run(sc))
    assert rep.identity_residual == 0.0 and rep.derivative_residual == 0.0


def test_audit_rk4_full_scenario():
    rep = finite_difference_audit(run(bundled("paper8", record_every=1, t_end=1.0)))
    assert rep.ok(1e-6)


def test_audit_euler_order():
    coarse = finite_difference_audit(run(smooth_path5("euler", 1e-3, 1.0, record_every=10)))
    fine = finite_difference_audit(run(smooth_path5("euler", 1e-4, 1.0, record_every=10)))
    assert 7.0 < coarse.derivative_residual / fine.derivative_residual < 13.0
