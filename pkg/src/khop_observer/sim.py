"""Fixed-step simulation of plant, controllers and k-hop observers as one coupled ODE.

Layout of the integrated vector ``y``: plant states (``nx`` entries, agent
by agent), then state estimates, then input-map estimates. Estimates are
stored per *row*: one row per (slot, component), where a slot is an
(estimator, target) pair. Slots are ordered target-major, estimators
ascending, which matches the stacking order of the disagreement matrices.
"""
from __future__ import annotations

import logging
import math
import warnings
from collections import namedtuple
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .funnel import DEFAULT_SAFETY, Funnel, FunnelBank, check_feasible, design_funnel_bank
from .graph import STANDARD, Graph, disagreement_matrix, is_connected, khop_neighbors
from .observer import (EstimateSlot, ObserverVariant, disagreement_state, gather_view, input_disagreement,
                       peer_set, ppio_derivative, ppso_derivative, relay_set, state_disagreement)
from .plant import Controller, consensus_control, consensus_disagreement, grid_initial_states

log = logging.getLogger(__name__)

INTEGRATORS = {"euler": 0, "rk4": 1}
# Largest stable |z| = |lambda dt| on the negative real axis.
STABILITY_RADIUS = {"euler": 2.0, "rk4": 2.785}


class NonFiniteStateError(FloatingPointError):
    pass


@dataclass
class Scenario:
    comm_graph: Graph
    agents: list
    k: int = 3
    mode: str = STANDARD
    task_graph: Graph | None = None
    controller_gain: float = 2.0
    control_mode: str = "estimated"  # estimated | truth | off
    variant: ObserverVariant = ObserverVariant.FULL
    delta: Funnel = field(default_factory=lambda: Funnel.from_gap(13.96, 0.117, 5.0))
    theta: Funnel = field(default_factory=lambda: Funnel.from_gap(230.0, 1.39, 5.0))
    rho: Funnel | None = None  # None: design from delta
    omega: Funnel | None = None  # None: design from theta
    overrides: dict = field(default_factory=dict)  # target -> {"rho"|"omega"|"delta"|"theta": Funnel}
    safety: float = DEFAULT_SAFETY
    x0: np.ndarray | None = None
    xhat0: float | np.ndarray = 0.0
    ghat0: float | np.ndarray = 0.0
    t_end: float = 3.0
    dt: float = 1e-4
    integrator: str = "rk4"
    record_every: int = 100
    seed: int | None = None
    name: str = "scenario"

    def __post_init__(self):
        if len(self.agents) != self.comm_graph.node_count:
            raise ValueError("one agent model per communication-graph node required")
        if self.task_graph is not None and self.task_graph.node_count != self.comm_graph.node_count:
            raise ValueError("task and communication graphs must share the node set")
        if not is_connected(self.comm_graph):
            raise ValueError("communication graph must be connected")
        if not self.dt > 0 or not self.t_end > 0:
            raise ValueError("dt and t_end must be positive")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {sorted(INTEGRATORS)}")
        if self.control_mode not in ("estimated", "truth", "off"):
            raise ValueError("control_mode must be estimated, truth or off")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    @property
    def n_agents(self) -> int:
        return self.comm_graph.node_count

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def controller(self) -> Controller | None:
        if self.control_mode == "off":
            return None
        task = self.task_graph or self.comm_graph
        return Controller(
            self.controller_gain,
            {i: task.neighbors(i) for i in task.nodes},
            {i: self.comm_graph.neighbors(i) for i in self.comm_graph.nodes},
            self.control_mode,
        )

    def initial_states(self) -> list:
        if self.x0 is not None:
            return [np.asarray(x, dtype=float) for x in self.x0]
        dims = {a.dim for a in self.agents}
        if len(dims) != 1:
            raise ValueError("heterogeneous dimensions need explicit initial states")
        return list(grid_initial_states(self.n_agents, dims.pop(), seed=self.seed))


Slot = namedtuple("Slot", "estimator target row dim")

KernelData = namedtuple("KernelData", [
    "x_off", "drift_code", "drift_gain", "input_code",
    "ctrl_on", "ctrl_gain", "ctrl_ptr", "ctrl_src",
    "dist_ptr", "dist_amp", "dist_freq", "dist_phase",
    "slot_ptr", "slot_target", "row_truth", "row_h", "peer_ptr", "peer_idx",
    "rho_a", "rho_b", "rho_l", "om_a", "om_b", "om_l",
    "de_a", "de_b", "de_l", "th_a", "th_b", "th_l",
    "use_drift", "use_input",
])


@dataclass
class Network:
    scenario: Scenario
    slots: list
    nx: int
    n_rows: int
    x_off: np.ndarray
    row_slot: np.ndarray
    row_comp: np.ndarray
    matrices: dict  # target -> DisagreementMatrix
    rho_banks: dict = field(default_factory=dict)
    omega_banks: dict = field(default_factory=dict)
    auto_designed: dict = field(default_factory=dict)  # target -> set of {"rho", "omega"}
    kernel: KernelData | None = None
    y0: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.nx + 2 * self.n_rows

    def slot_rows(self, target: int) -> list:
        return [s for s in self.slots if s.target == target]

    def row_label(self, r: int) -> str:
        s = self.slots[self.row_slot[r]]
        return f"a{s.estimator}.t{s.target}[{self.row_comp[r] + 1}]"

    def stable_dt(self) -> float:
        """Linearized step-size bound for the stiffest observer row at steady state."""
        kd = self.kernel
        worst = 0.0
        for tgt, dm in self.matrices.items():
            rows = np.concatenate([np.arange(s.row, s.row + s.dim) for s in self.slot_rows(tgt)])
            rho_inf = np.min(kd.rho_b[rows])
            worst = max(worst, 4.0 * dm.lambda_max / rho_inf ** 2)
            if kd.use_input:
                worst = max(worst, 4.0 * dm.lambda_max / np.min(kd.om_b[rows]) ** 2)
        return STABILITY_RADIUS[self.scenario.integrator] / worst if worst else math.inf


# --------------------------------------------------------------------------- kernel

@numba.njit(cache=True)
def _drift_add(code, gain, src, soff, dim, out, ooff):
    if code == 1:
        a = src[soff]
        b = src[soff + 1]
        out[ooff] += math.tanh(0.5 * a + 0.5 * b)
        out[ooff + 1] += math.sin(0.5 * a - 0.5 * b)
    elif code == 2:
        for c in range(dim):
            out[ooff + c] += gain * src[soff + c]
    elif code == 3:
        for c in range(dim):
            out[ooff + c] += gain * math.tanh(src[soff + c])


@numba.njit(cache=True)
def _correction(dis, bound):
    """Returns (-J_T(e) T(e) / bound, clamped?)."""
    e = dis / bound
    lim = 1.0 - 1e-9
    hit = 0
    if e > lim:
        e = lim
        hit = 1
    elif e < -lim:
        e = -lim
        hit = 1
    return -(2.0 / (1.0 - e * e)) * 2.0 * math.atanh(e) / bound, hit


@numba.njit(cache=True)
def _rhs(t, y, dy, u, g, xi, mu, K):
    """Coupled vector field; fills u, g (true input map), xi, mu; returns clamp count."""
    n_agents = K.x_off.shape[0] - 1
    nx = K.x_off[n_agents]
    R = K.row_truth.shape[0]
    for i in range(n_agents):
        lo = K.x_off[i]
        hi = K.x_off[i + 1]
        for c in range(lo, hi):
            u[c] = 0.0
        if K.ctrl_on:
            for p in range(K.ctrl_ptr[i], K.ctrl_ptr[i + 1]):
                src = K.ctrl_src[p]
                for c in range(hi - lo):
                    u[lo + c] += math.tanh(y[src + c] - y[lo + c])
            for c in range(lo, hi):
                u[c] *= K.ctrl_gain
        for c in range(lo, hi):
            g[c] = math.tanh(u[c]) if K.input_code[i] == 1 else u[c]
            w = 0.0
            for p in range(K.dist_ptr[c], K.dist_ptr[c + 1]):
                w += K.dist_amp[p] * math.sin(K.dist_freq[p] * t + K.dist_phase[p])
            dy[c] = g[c] + w
        _drift_add(K.drift_code[i], K.drift_gain[i], y, lo, hi - lo, dy, lo)

    clamps = 0
    # funnels nearly always share a decay rate; reuse the exponential
    lr = -1.0
    er = 0.0
    lo_ = -1.0
    eo = 0.0
    for r in range(R):
        own = y[nx + r]
        acc = 0.0
        for p in range(K.peer_ptr[r], K.peer_ptr[r + 1]):
            acc += own - y[nx + K.peer_idx[p]]
        acc += K.row_h[r] * (own - y[K.row_truth[r]])
        xi[r] = acc
        if K.rho_l[r] != lr:
            lr = K.rho_l[r]
            er = math.exp(-lr * t)
        rho = K.rho_a[r] * er + K.rho_b[r]
        corr, hit = _correction(acc, rho)
        clamps += hit
        dy[nx + r] = corr
        if K.use_input:
            own = y[nx + R + r]
            acc = 0.0
            for p in range(K.peer_ptr[r], K.peer_ptr[r + 1]):
                acc += own - y[nx + R + K.peer_idx[p]]
            acc += K.row_h[r] * (own - g[K.row_truth[r]])
            mu[r] = acc
            if K.om_l[r] != lo_:
                lo_ = K.om_l[r]
                eo = math.exp(-lo_ * t)
            om = K.om_a[r] * eo + K.om_b[r]
            corr, hit = _correction(acc, om)
            clamps += hit
            dy[nx + R + r] = corr
            dy[nx + r] += own
        else:
            mu[r] = 0.0
            dy[nx + R + r] = 0.0
    if K.use_drift:
        S = K.slot_target.shape[0]
        for s in range(S):
            tgt = K.slot_target[s]
            lo = K.slot_ptr[s]
            _drift_add(K.drift_code[tgt], K.drift_gain[tgt], y, nx + lo, K.slot_ptr[s + 1] - lo, dy, nx + lo)
    return clamps


@numba.njit(cache=True)
def _margins(t, y, g, xi, mu, K, out):
    """Minimum normalized margins 1 - |v|/bound for xi, mu, x_tilde, g_tilde."""
    n_agents = K.x_off.shape[0] - 1
    nx = K.x_off[n_agents]
    R = K.row_truth.shape[0]
    m = np.full(4, np.inf)
    lam = np.full(4, -1.0)
    ex = np.zeros(4)
    for r in range(R):
        for q in range(4 if K.use_input else 2):
            if q == 0:
                a, b, l, v = K.rho_a[r], K.rho_b[r], K.rho_l[r], xi[r]
            elif q == 1:
                a, b, l, v = K.de_a[r], K.de_b[r], K.de_l[r], y[nx + r] - y[K.row_truth[r]]
            elif q == 2:
                a, b, l, v = K.om_a[r], K.om_b[r], K.om_l[r], mu[r]
            else:
                a, b, l, v = K.th_a[r], K.th_b[r], K.th_l[r], y[nx + R + r] - g[K.row_truth[r]]
            if l != lam[q]:
                lam[q] = l
                ex[q] = math.exp(-l * t)
            m[q] = min(m[q], 1.0 - abs(v) / (a * ex[q] + b))
    out[0] = m[0]
    out[1] = m[2]
    out[2] = m[1]
    out[3] = m[3]


@numba.njit(cache=True)
def _advance(t, y, dt, method, k1, K, ynew, k2, k3, k4, tmp, u, g, xi, mu):
    """One step from (t, y) given k1 = f(t, y); returns clamps from the later stages."""
    n = y.shape[0]
    if method == 0:
        for j in range(n):
            ynew[j] = y[j] + dt * k1[j]
        return 0
    h = 0.5 * dt
    for j in range(n):
        tmp[j] = y[j] + h * k1[j]
    c = _rhs(t + h, tmp, k2, u, g, xi, mu, K)
    for j in range(n):
        tmp[j] = y[j] + h * k2[j]
    c += _rhs(t + h, tmp, k3, u, g, xi, mu, K)
    for j in range(n):
        tmp[j] = y[j] + dt * k3[j]
    c += _rhs(t + dt, tmp, k4, u, g, xi, mu, K)
    for j in range(n):
        ynew[j] = y[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
    return c


@numba.njit(cache=True)
def _integrate(y0, dt, n_steps, method, record_every, K, n_rec,
               rec_t, rec_y, rec_dy, rec_u, rec_g, rec_xi, rec_mu, rec_margin, counts):
    """Integrate n_steps; counts = [clamps, viol_xi, viol_mu, viol_x, viol_g, status, bad_step, bad_index]."""
    n = y0.shape[0]
    n_agents = K.x_off.shape[0] - 1
    nx = K.x_off[n_agents]
    R = K.row_truth.shape[0]
    y = y0.copy()
    ynew = np.empty(n)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    u = np.empty(nx)
    g = np.empty(nx)
    xi = np.empty(R)
    mu = np.empty(R)
    m = np.empty(4)
    win = np.full(4, np.inf)
    rec = 0
    for step in range(n_steps + 1):
        t = step * dt
        counts[0] += _rhs(t, y, k1, u, g, xi, mu, K)
        _margins(t, y, g, xi, mu, K, m)
        for q in range(4):
            if m[q] <= 0.0:
                counts[1 + q] += 1
            win[q] = min(win[q], m[q])
        if step % record_every == 0 or step == n_steps:
            rec_t[rec] = t
            rec_y[rec, :] = y
            rec_dy[rec, :] = k1
            rec_u[rec, :] = u
            rec_g[rec, :] = g
            rec_xi[rec, :] = xi
            rec_mu[rec, :] = mu
            rec_margin[rec, :] = win
            win[:] = np.inf
            rec += 1
        if step == n_steps:
            break
        counts[0] += _advance(t, y, dt, method, k1, K, ynew, k2, k3, k4, tmp, u, g, xi, mu)
        for j in range(n):
            if not math.isfinite(ynew[j]):
                counts[5] = 1
                counts[6] = step + 1
                counts[7] = j
                return rec
        y[:] = ynew
    return rec


# --------------------------------------------------------------------------- assembly

def _funnel_rows(funnels: list) -> tuple:
    a = np.array([f.gap for f in funnels], dtype=float)
    b = np.array([f.rho_inf for f in funnels], dtype=float)
    lam = np.array([f.decay for f in funnels], dtype=float)
    return a, b, lam


def _broadcast_init(v, dim):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.size == 1:
        return np.full(dim, float(v[0]))
    if v.size != dim:
        raise ValueError(f"initial estimate has {v.size} entries, target dimension is {dim}")
    return v


def build_network(sc: Scenario) -> Network:
    """Index slots, assemble kernel arrays, design funnels and pass the feasibility gate."""
    gc = sc.comm_graph
    N = sc.n_agents
    dims = [a.dim for a in sc.agents]
    x_off = np.concatenate([[0], np.cumsum(dims)]).astype(np.int64)
    nx = int(x_off[-1])

    slots, matrices, nbhds = [], {}, {}
    row = 0
    for tgt in gc.nodes:
        nb = khop_neighbors(gc, tgt, sc.k, sc.mode)
        nbhds[tgt] = nb
        if nb.eta == 0:
            continue
        matrices[tgt] = disagreement_matrix(gc, nb)
        for est in nb.members:
            slots.append(Slot(est, tgt, row, dims[tgt - 1]))
            row += dims[tgt - 1]
    R = row
    if R == 0:
        raise ValueError("no agent has a k-hop neighborhood; nothing to estimate")
    slot_of = {(s.estimator, s.target): si for si, s in enumerate(slots)}
    row_slot = np.empty(R, dtype=np.int64)
    row_comp = np.empty(R, dtype=np.int64)
    for si, s in enumerate(slots):
        row_slot[s.row:s.row + s.dim] = si
        row_comp[s.row:s.row + s.dim] = np.arange(s.dim)

    # local disagreement wiring, straight from the per-estimator formula
    row_truth = np.empty(R, dtype=np.int64)
    row_h = np.empty(R)
    peer_ptr = [0]
    peer_idx = []
    for r in range(R):
        s = slots[row_slot[r]]
        c = row_comp[r]
        row_truth[r] = x_off[s.target - 1] + c
        row_h[r] = len(relay_set(gc, s.target, s.estimator, sc.mode))
        for l in peer_set(gc, s.target, s.estimator, sc.k, sc.mode):
            peer_idx.append(slots[slot_of[(l, s.target)]].row + c)
        peer_ptr.append(len(peer_idx))

    ctrl = sc.controller()
    ctrl_ptr, ctrl_src = [0], []
    if ctrl is not None:
        if len(set(dims)) != 1:
            raise ValueError("consensus control needs agents of equal dimension")
        for i in gc.nodes:
            direct, estimated = ctrl.split(i)
            for j in direct:
                ctrl_src.append(x_off[j - 1])
            for j in estimated:
                if (i, j) not in slot_of:
                    raise ValueError(f"agent {i} needs an estimate of task neighbor {j}, "
                                     f"which is outside its {sc.k}-hop neighborhood")
                ctrl_src.append(nx + slots[slot_of[(i, j)]].row)
            ctrl_ptr.append(len(ctrl_src))
    else:
        ctrl_ptr = [0] * (N + 1)

    dist_ptr, amp, freq, phase = [0], [], [], []
    for a in sc.agents:
        d = a.disturbance
        for c in range(a.dim):
            if d.terms:
                amp.extend(d.amp[c]); freq.extend(d.freq[c]); phase.extend(d.phase[c])
            dist_ptr.append(len(amp))

    placeholder = np.ones(R)
    kd = KernelData(
        x_off=x_off,
        drift_code=np.array([a.drift.code for a in sc.agents], dtype=np.int64),
        drift_gain=np.array([a.drift.gain for a in sc.agents], dtype=float),
        input_code=np.array([a.input_map.code for a in sc.agents], dtype=np.int64),
        ctrl_on=ctrl is not None,
        ctrl_gain=float(sc.controller_gain),
        ctrl_ptr=np.array(ctrl_ptr, dtype=np.int64),
        ctrl_src=np.array(ctrl_src, dtype=np.int64),
        dist_ptr=np.array(dist_ptr, dtype=np.int64),
        dist_amp=np.array(amp, dtype=float),
        dist_freq=np.array(freq, dtype=float),
        dist_phase=np.array(phase, dtype=float),
        slot_ptr=np.array([s.row for s in slots] + [R], dtype=np.int64),
        slot_target=np.array([s.target - 1 for s in slots], dtype=np.int64),
        row_truth=row_truth,
        row_h=row_h,
        peer_ptr=np.array(peer_ptr, dtype=np.int64),
        peer_idx=np.array(peer_idx, dtype=np.int64),
        rho_a=placeholder, rho_b=placeholder, rho_l=placeholder,
        om_a=placeholder, om_b=placeholder, om_l=placeholder,
        de_a=placeholder, de_b=placeholder, de_l=placeholder,
        th_a=placeholder, th_b=placeholder, th_l=placeholder,
        use_drift=sc.variant.uses_drift,
        use_input=sc.variant.uses_input,
    )

    x0 = sc.initial_states()
    if len(x0) != N or any(len(x) != d for x, d in zip(x0, dims)):
        raise ValueError("initial states do not match agent dimensions")
    y0 = np.zeros(nx + 2 * R)
    y0[:nx] = np.concatenate(x0)
    for s in slots:
        y0[nx + s.row:nx + s.row + s.dim] = _broadcast_init(sc.xhat0, s.dim)
        if sc.variant.uses_input:
            y0[nx + R + s.row:nx + R + s.row + s.dim] = _broadcast_init(sc.ghat0, s.dim)

    net = Network(sc, slots, nx, R, x_off, row_slot, row_comp, matrices, kernel=kd, y0=y0)

    # initial disagreements for the feasibility gate
    dy = np.empty_like(y0)
    u, g = np.empty(nx), np.empty(nx)
    xi0, mu0 = np.empty(R), np.empty(R)
    _rhs(0.0, y0, dy, u, g, xi0, mu0, kd)

    rho_f, om_f, de_f, th_f = [None] * R, [None] * R, [None] * R, [None] * R
    for tgt, dm in matrices.items():
        rows = np.concatenate([np.arange(s.row, s.row + s.dim) for s in net.slot_rows(tgt)])
        eta, n = nbhds[tgt].eta, dims[tgt - 1]
        ov = sc.overrides.get(tgt, {})
        delta = ov.get("delta", sc.delta)
        theta = ov.get("theta", sc.theta)
        names = [f"xi {net.row_label(r)}" for r in rows]
        auto = set()

        rho = ov.get("rho", sc.rho)
        if rho is None:
            bank = design_funnel_bank(dm, delta, eta, n, xi0[rows], sc.safety)
            auto.add("rho")
        else:
            check_feasible(rho.rho0, xi0[rows], names)
            bank = FunnelBank(tuple([rho] * len(rows)), delta, dm.lambda_min, eta, n)
        net.rho_banks[tgt] = bank

        if sc.variant.uses_input:
            omega = ov.get("omega", sc.omega)
            names = [f"mu {net.row_label(r)}" for r in rows]
            if omega is None:
                obank = design_funnel_bank(dm, theta, eta, n, mu0[rows], sc.safety)
                auto.add("omega")
            else:
                check_feasible(omega.rho0, mu0[rows], names)
                obank = FunnelBank(tuple([omega] * len(rows)), theta, dm.lambda_min, eta, n)
            net.omega_banks[tgt] = obank
        net.auto_designed[tgt] = auto

        for j, r in enumerate(rows):
            rho_f[r] = bank.funnels[j]
            de_f[r] = delta
            th_f[r] = theta
            om_f[r] = net.omega_banks[tgt].funnels[j] if sc.variant.uses_input else theta

    ra, rb, rl = _funnel_rows(rho_f)
    oa, ob, ol = _funnel_rows(om_f)
    da, db, dl = _funnel_rows(de_f)
    ta, tb, tl = _funnel_rows(th_f)
    net.kernel = kd._replace(rho_a=ra, rho_b=rb, rho_l=rl, om_a=oa, om_b=ob, om_l=ol,
                             de_a=da, de_b=db, de_l=dl, th_a=ta, th_b=tb, th_l=tl)
    for tgt, bank in list(net.rho_banks.items()) + list(net.omega_banks.items()):
        grid = np.linspace(0.0, sc.t_end, 200)
        if np.min(bank.certificate_slack(grid)) < 0:
            warnings.warn(f"funnels of target {tgt} do not certify their error bound "
                          f"(||funnel vector|| > lambda_min * bound)", stacklevel=2)
    return net


# --------------------------------------------------------------------------- results

@dataclass
class Trajectory:
    network: Network
    t: np.ndarray
    y: np.ndarray
    dy: np.ndarray
    u: np.ndarray
    g: np.ndarray
    xi: np.ndarray
    mu: np.ndarray
    margins: np.ndarray  # per record: min normalized margin since previous record
    clamps: int
    violations: dict
    status: str = "ok"

    @property
    def x(self) -> np.ndarray:
        return self.y[:, :self.network.nx]

    @property
    def xhat(self) -> np.ndarray:
        nx, R = self.network.nx, self.network.n_rows
        return self.y[:, nx:nx + R]

    @property
    def ghat(self) -> np.ndarray:
        nx, R = self.network.nx, self.network.n_rows
        return self.y[:, nx + R:]

    def _envelope(self, a, b, lam):
        return a[None, :] * np.exp(-lam[None, :] * self.t[:, None]) + b[None, :]

    @property
    def rho(self):
        K = self.network.kernel
        return self._envelope(K.rho_a, K.rho_b, K.rho_l)

    @property
    def omega(self):
        K = self.network.kernel
        return self._envelope(K.om_a, K.om_b, K.om_l)

    @property
    def delta(self):
        K = self.network.kernel
        return self._envelope(K.de_a, K.de_b, K.de_l)

    @property
    def theta(self):
        K = self.network.kernel
        return self._envelope(K.th_a, K.th_b, K.th_l)

    @property
    def x_tilde(self) -> np.ndarray:
        return self.xhat - self.x[:, self.network.kernel.row_truth]

    @property
    def g_tilde(self) -> np.ndarray:
        return self.ghat - self.g[:, self.network.kernel.row_truth]

    def consensus_norm(self) -> np.ndarray:
        dims = {a.dim for a in self.network.scenario.agents}
        if len(dims) != 1:
            return np.full(len(self.t), np.nan)
        n = dims.pop()
        return np.array([consensus_disagreement(x, n)[1] for x in self.x])

    @property
    def total_violations(self) -> int:
        return sum(self.violations.values())

    @property
    def funnel_satisfying(self) -> bool:
        return self.status == "ok" and self.total_violations == 0 and self.clamps == 0

    def stacked_residuals(self) -> tuple:
        """Per-record residuals of xi - M x_tilde and mu - M g_tilde from the assembled matrices."""
        net = self.network
        rx = np.zeros(len(self.t))
        rg = np.zeros(len(self.t))
        xt, gt = self.x_tilde, self.g_tilde
        use_input = net.scenario.variant.uses_input
        for tgt, dm in net.matrices.items():
            sl = net.slot_rows(tgt)
            rows = np.array([[s.row + c for c in range(s.dim)] for s in sl])  # (eta, n)
            lhs = self.xi[:, rows]
            rhs = np.einsum("ab,tbc->tac", dm.M, xt[:, rows])
            rx = np.maximum(rx, np.max(np.abs(lhs - rhs), axis=(1, 2)))
            if use_input:
                rhs = np.einsum("ab,tbc->tac", dm.M, gt[:, rows])
                rg = np.maximum(rg, np.max(np.abs(self.mu[:, rows] - rhs), axis=(1, 2)))
        return rx, rg

    def summary(self) -> str:
        net = self.network
        cn = self.consensus_norm()
        rx, rg = self.stacked_residuals()
        lines = [
            f"scenario: {net.scenario.name}",
            f"status: {self.status}",
            f"agents: {net.scenario.n_agents}  slots: {len(net.slots)}  rows: {net.n_rows}",
            f"integrator: {net.scenario.integrator}  dt: {net.scenario.dt:g}  t_end: {self.t[-1]:g}",
            f"violations xi: {self.violations['xi']}  mu: {self.violations['mu']}  "
            f"x_tilde: {self.violations['x_tilde']}  g_tilde: {self.violations['g_tilde']}",
            f"clamp events: {self.clamps}",
        ]
        m = np.min(self.margins, axis=0)
        lines.append("min normalized margins: " + "  ".join(
            f"{k}: {v:.6g}" for k, v in zip(("xi", "mu", "x_tilde", "g_tilde"), m) if np.isfinite(v)))
        lines.append(f"max stacked residual xi: {rx.max():.3g}  mu: {rg.max():.3g}")
        if np.all(np.isfinite(cn)):
            lines.append(f"consensus norm: initial {cn[0]:.6g}  terminal {cn[-1]:.6g}")
        lines.append(f"funnel satisfying: {'yes' if self.funnel_satisfying else 'no'}")
        return "\n".join(lines) + "\n"

    # --- CSV export
    def column_names(self) -> list:
        net = self.network
        cols = ["t"]
        for i, a in enumerate(net.scenario.agents, start=1):
            for q in ("x", "u", "g"):
                cols += [f"a{i}.self.{q}.{c + 1}" for c in range(a.dim)]
        quantities = ["xhat", "xi", "e", "rho", "delta"]
        if net.scenario.variant.uses_input:
            quantities += ["ghat", "mu", "q", "omega", "theta"]
        for q in quantities:
            for r in range(net.n_rows):
                s = net.slots[net.row_slot[r]]
                cols.append(f"a{s.estimator}.t{s.target}.{q}.{net.row_comp[r] + 1}")
        cols.append("net.all.consensus.norm")
        return cols

    def table(self) -> np.ndarray:
        net = self.network
        parts = [self.t[:, None]]
        for i in range(net.scenario.n_agents):
            lo, hi = net.x_off[i], net.x_off[i + 1]
            parts += [self.x[:, lo:hi], self.u[:, lo:hi], self.g[:, lo:hi]]
        rho, delta = self.rho, self.delta
        parts += [self.xhat, self.xi, self.xi / rho, rho, delta]
        if net.scenario.variant.uses_input:
            om = self.omega
            parts += [self.ghat, self.mu, self.mu / om, om, self.theta]
        parts.append(self.consensus_norm()[:, None])
        return np.hstack(parts)

    def write_csv(self, path) -> None:
        np.savetxt(path, self.table(), delimiter=",", header=",".join(self.column_names()), comments="", fmt="%.17g")

    def write_assertions(self, path) -> None:
        rx, rg = self.stacked_residuals()
        data = np.column_stack([self.t, self.margins, rx, rg, self.consensus_norm()])
        header = "t,margin_xi,margin_mu,margin_x_tilde,margin_g_tilde,residual_xi,residual_mu,consensus_norm"
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def run(sc: Scenario | Network) -> Trajectory:
    net = sc if isinstance(sc, Network) else build_network(sc)
    sc = net.scenario
    if sc.dt > net.stable_dt():
        log.warning("dt=%g exceeds the linearized stability bound %.3g for %s; expect funnel contact",
                    sc.dt, net.stable_dt(), sc.integrator)
    n_steps = sc.n_steps
    every = sc.record_every
    n_rec = len(range(0, n_steps + 1, every)) + (1 if n_steps % every else 0)
    n, nx, R = net.size, net.nx, net.n_rows
    rec_t = np.zeros(n_rec)
    rec_y = np.zeros((n_rec, n))
    rec_dy = np.zeros((n_rec, n))
    rec_u = np.zeros((n_rec, nx))
    rec_g = np.zeros((n_rec, nx))
    rec_xi = np.zeros((n_rec, R))
    rec_mu = np.zeros((n_rec, R))
    rec_m = np.zeros((n_rec, 4))
    counts = np.zeros(8, dtype=np.int64)
    got = _integrate(net.y0, sc.dt, n_steps, INTEGRATORS[sc.integrator], every, net.kernel, n_rec,
                     rec_t, rec_y, rec_dy, rec_u, rec_g, rec_xi, rec_mu, rec_m, counts)
    if counts[5]:
        j = int(counts[7])
        where = f"plant state {j}" if j < nx else (
            f"slot {net.row_label((j - nx) % R)} ({'state' if j < nx + R else 'input'} estimate)")
        raise NonFiniteStateError(f"non-finite value at step {counts[6]} (t={counts[6] * sc.dt:g}) in {where}")
    rec_m[~np.isfinite(rec_m)] = np.nan
    if not sc.variant.uses_input:
        rec_m[:, [1, 3]] = np.nan
    violations = dict(zip(("xi", "mu", "x_tilde", "g_tilde"), (int(v) for v in counts[1:5])))
    return Trajectory(net, rec_t[:got], rec_y[:got], rec_dy[:got], rec_u[:got], rec_g[:got],
                      rec_xi[:got], rec_mu[:got], rec_m[:got], int(counts[0]), violations)


def derivative(net: Network, t: float, y) -> tuple:
    """Evaluate the coupled vector field once; returns (dy, u, g, xi, mu, clamps)."""
    y = np.asarray(y, dtype=float)
    dy = np.empty_like(y)
    u, g = np.empty(net.nx), np.empty(net.nx)
    xi, mu = np.empty(net.n_rows), np.empty(net.n_rows)
    c = _rhs(float(t), y, dy, u, g, xi, mu, net.kernel)
    return dy, u, g, xi, mu, c


def step(net: Network, y, t: float, dt: float | None = None) -> np.ndarray:
    """Advance the coupled state one explicit step of the scenario's integrator."""
    sc = net.scenario
    dt = sc.dt if dt is None else dt
    y = np.asarray(y, dtype=float)
    k1, u, g, xi, mu, _ = derivative(net, t, y)
    out = np.empty_like(y)
    work = [np.empty_like(y) for _ in range(4)]
    _advance(float(t), y, float(dt), INTEGRATORS[sc.integrator], k1, net.kernel, out, *work, u, g, xi, mu)
    if not np.all(np.isfinite(out)):
        j = int(np.flatnonzero(~np.isfinite(out))[0])
        raise NonFiniteStateError(f"non-finite value at t={t + dt:g}, index {j}")
    return out


@dataclass(frozen=True)
class AuditReport:
    identity_residual: float  # max |dxi/dt - M dx_tilde/dt| / scale, both by finite differences
    derivative_residual: float  # max |dxi/dt - M x_tilde'| / scale, x_tilde' from the vector field
    scale: float

    def ok(self, tol: float = 1e-6) -> bool:
        return self.identity_residual <= tol


def finite_difference_audit(traj: Trajectory) -> AuditReport:
    """Check xi' = M x_tilde' on the recorded grid (the graph is time invariant)."""
    net = traj.network
    dt = np.diff(traj.t)
    if dt.size == 0:
        return AuditReport(0.0, 0.0, 0.0)
    nx, R = net.nx, net.n_rows
    truth = net.kernel.row_truth
    xt = traj.x_tilde
    xt_dot = traj.dy[:, nx:nx + R] - traj.dy[:, truth]
    id_res = der_res = scale = 0.0
    for tgt, dm in net.matrices.items():
        rows = np.array([[s.row + c for c in range(s.dim)] for s in net.slot_rows(tgt)])
        dxi = np.diff(traj.xi[:, rows], axis=0) / dt[:, None, None]
        dxt = np.einsum("ab,tbc->tac", dm.M, np.diff(xt[:, rows], axis=0)) / dt[:, None, None]
        inst = np.einsum("ab,tbc->tac", dm.M, xt_dot[:-1][:, rows])
        id_res = max(id_res, float(np.max(np.abs(dxi - dxt))))
        der_res = max(der_res, float(np.max(np.abs(dxi - inst))))
        scale = max(scale, float(np.max(np.abs(inst))), float(np.max(np.abs(dxi))))
    if scale == 0.0:
        return AuditReport(0.0, 0.0, 0.0)
    return AuditReport(id_res / scale, der_res / scale, scale)


def with_changes(sc: Scenario, **kw) -> Scenario:
    return replace(sc, **kw)


def reference_derivative(net: Network, t: float, y) -> np.ndarray:
    """Slow vector field assembled from the observer and plant functions, slot by slot.

    Shares nothing with the compiled kernel except the layout, so the two can
    be compared.
    """
    sc = net.scenario
    gc = sc.comm_graph
    y = np.asarray(y, dtype=float)
    nx, R = net.nx, net.n_rows
    x = {i: y[net.x_off[i - 1]:net.x_off[i]] for i in gc.nodes}
    xhat, ghat = {}, {}
    for s in net.slots:
        xhat[(s.estimator, s.target)] = y[nx + s.row:nx + s.row + s.dim]
        ghat[(s.estimator, s.target)] = y[nx + R + s.row:nx + R + s.row + s.dim]

    ctrl = sc.controller()
    out = np.zeros_like(y)
    g_true = {}
    for i, a in zip(gc.nodes, sc.agents):
        if ctrl is None:
            u = np.zeros(a.dim)
        else:
            direct, estimated = ctrl.split(i)
            u = consensus_control(x[i], [x[j] for j in direct], [xhat[(i, j)] for j in estimated], ctrl.gain)
        g_true[i] = a.input_map(u)
        out[net.x_off[i - 1]:net.x_off[i]] = a.drift(x[i]) + g_true[i] + a.disturbance(t, a.dim)

    K = net.kernel
    for s in net.slots:
        tgt, est = s.target, s.estimator
        rows = slice(s.row, s.row + s.dim)
        est_x = {j: xhat[(j, tgt)] for (j, tt) in xhat if tt == tgt}
        est_g = {j: ghat[(j, tgt)] for (j, tt) in ghat if tt == tgt}
        xi = state_disagreement(gc, tgt, gather_view(gc, tgt, est, sc.k, est_x, x[tgt], sc.mode), sc.k, sc.mode)
        rho = K.rho_a[rows] * np.exp(-K.rho_l[rows] * t) + K.rho_b[rows]
        slot = EstimateSlot(est, tgt, xhat[(est, tgt)], ghat[(est, tgt)])
        if sc.variant.uses_input:
            mu = input_disagreement(gc, tgt, gather_view(gc, tgt, est, sc.k, est_g, g_true[tgt], sc.mode),
                                    sc.k, sc.mode)
            om = K.om_a[rows] * np.exp(-K.om_l[rows] * t) + K.om_b[rows]
            dis = disagreement_state(xi, rho, mu, om)
            out[nx + R + s.row:nx + R + s.row + s.dim] = ppio_derivative(slot, dis, om)
        else:
            dis = disagreement_state(xi, rho)
        out[nx + s.row:nx + s.row + s.dim] = ppso_derivative(slot, dis, rho, sc.variant, sc.agents[tgt - 1].drift)
    return out
