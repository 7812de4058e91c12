"""Agent dynamics x_i' = f_i(x_i) + g_i(u_i) + w_i(x, t) and consensus control.

Drift, input-map and disturbance families carry integer codes and flat
parameter arrays so the simulator kernel can evaluate them without Python
callbacks.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

DRIFT_CODES = {"zero": 0, "paper": 1, "linear": 2, "tanh": 3}
INPUT_CODES = {"identity": 0, "tanh": 1}
CONTROL_MODES = ("truth", "estimated")


def sim_drift(x):
    """[tanh(0.5 x1 + 0.5 x2), sin(0.5 x1 - 0.5 x2)], Lipschitz constant 1."""
    x = np.asarray(x, dtype=float)
    return np.array([np.tanh(0.5 * x[0] + 0.5 * x[1]), np.sin(0.5 * x[0] - 0.5 * x[1])])


@dataclass(frozen=True)
class Drift:
    kind: str = "paper"
    gain: float = 1.0

    def __post_init__(self):
        if self.kind not in DRIFT_CODES:
            raise ValueError(f"unknown drift {self.kind!r}; choose from {sorted(DRIFT_CODES)}")

    @property
    def code(self) -> int:
        return DRIFT_CODES[self.kind]

    @property
    def lipschitz(self) -> float:
        return {"zero": 0.0, "paper": 1.0}.get(self.kind, abs(self.gain))

    def check_dim(self, n: int) -> None:
        if self.kind == "paper" and n != 2:
            raise ValueError("drift 'paper' is defined for 2-dimensional agents")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "paper":
            return sim_drift(x)
        if self.kind == "linear":
            return self.gain * x
        return self.gain * np.tanh(x)


@dataclass(frozen=True)
class InputMap:
    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in INPUT_CODES:
            raise ValueError(f"unknown input map {self.kind!r}; choose from {sorted(INPUT_CODES)}")

    @property
    def code(self) -> int:
        return INPUT_CODES[self.kind]

    @property
    def boundedness(self) -> str:
        return "bounded" if self.kind == "tanh" else "neither"

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return np.tanh(u) if self.kind == "tanh" else u.copy()


@dataclass(frozen=True)
class Disturbance:
    """Sum of sines per component: w_c(t) = sum_k amp[c,k] sin(freq[c,k] t + phase[c,k])."""

    family: str = "zero"
    amp: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    freq: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    phase: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def bound(self) -> float:
        """Uniform bound on every component."""
        if self.amp.size == 0:
            return 0.0
        return float(np.max(np.sum(np.abs(self.amp), axis=1)))

    @property
    def terms(self) -> int:
        return self.amp.shape[1] if self.amp.ndim == 2 else 0

    def __call__(self, t, n: int):
        if self.terms == 0:
            return np.zeros(n)
        return np.sum(self.amp * np.sin(self.freq * t + self.phase), axis=1)


def make_disturbance(family: str, n: int, agent: int = 1, n_agents: int = 1, amplitude: float = 0.0,
                     frequency: float = 1.0, seed: int = 0, terms: int = 8) -> Disturbance:
    if family == "zero" or amplitude == 0.0:
        return Disturbance("zero")
    if family == "sinusoid":
        ph = np.array([[2 * np.pi * (agent - 1) / n_agents + 0.5 * np.pi * c] for c in range(n)])
        return Disturbance(family, np.full((n, 1), amplitude), np.full((n, 1), frequency), ph)
    if family == "random":
        rng = np.random.default_rng([seed, agent])
        w = rng.uniform(0.5, 1.0, size=(n, terms))
        amp = amplitude * w / w.sum(axis=1, keepdims=True)
        freq = rng.uniform(0.5, 2.0, size=(n, terms)) * frequency
        ph = rng.uniform(0.0, 2 * np.pi, size=(n, terms))
        return Disturbance(family, amp, freq, ph)
    raise ValueError(f"unknown disturbance family {family!r}")


def disturbance_eval(model: "AgentModel", x_global, t) -> np.ndarray:
    return model.disturbance(t, model.dim)


@dataclass(frozen=True)
class AgentModel:
    id: int
    dim: int = 2
    drift: Drift = field(default_factory=Drift)
    input_map: InputMap = field(default_factory=InputMap)
    disturbance: Disturbance = field(default_factory=Disturbance)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        self.drift.check_dim(self.dim)
        if self.disturbance.terms and self.disturbance.amp.shape[0] != self.dim:
            raise ValueError(f"agent {self.id}: disturbance dimension mismatch")

    def rhs(self, x, u, t, x_global=None):
        return self.drift(x) + self.input_map(u) + self.disturbance(t, self.dim)


@dataclass(frozen=True)
class Controller:
    """Tanh consensus over task edges; non-communicating task neighbors are estimated."""

    gain: float
    task_neighbors: dict
    comm_neighbors: dict
    mode: str = "estimated"

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("controller gain must be positive")
        if self.mode not in CONTROL_MODES:
            raise ValueError(f"controller mode must be one of {CONTROL_MODES}")

    def split(self, i: int) -> tuple:
        """(neighbors read directly, neighbors needing an estimate) for agent i."""
        task = sorted(self.task_neighbors.get(i, ()))
        if self.mode == "truth":
            return tuple(task), ()
        comm = self.comm_neighbors.get(i, frozenset())
        return tuple(j for j in task if j in comm), tuple(j for j in task if j not in comm)

    def bound(self, i: int) -> float:
        """Componentwise bound k_c |N_T(i)| on u_i."""
        return self.gain * len(self.task_neighbors.get(i, ()))


def consensus_control(x_own, truth_neighbors, estimated_neighbors, k_c: float) -> np.ndarray:
    x_own = np.asarray(x_own, dtype=float)
    u = np.zeros_like(x_own)
    for xj in itertools.chain(truth_neighbors, estimated_neighbors):
        u += np.tanh(np.asarray(xj, dtype=float) - x_own)
    return k_c * u


def consensus_projector(n_agents: int, n: int = 2) -> np.ndarray:
    """I_{nN} - (1 1^T kron I_n) / N."""
    ones = np.ones((n_agents, n_agents))
    return np.eye(n_agents * n) - np.kron(ones, np.eye(n)) / n_agents


def consensus_disagreement(x_global, n: int = 2) -> tuple:
    """(Pi x, ||Pi x||) for the stacked global state."""
    x = np.asarray(x_global, dtype=float).ravel()
    X = x.reshape(-1, n)
    ec = (X - X.mean(axis=0)).ravel()
    return ec, float(np.linalg.norm(ec))


def grid_initial_states(n_agents: int, n: int = 2, half_width: float = 5.0, seed: int | None = None) -> np.ndarray:
    """Deterministic lattice spread over [-w, w]^n, or uniform draws when seeded."""
    if seed is not None:
        return np.random.default_rng(seed).uniform(-half_width, half_width, size=(n_agents, n))
    m = int(np.ceil(n_agents ** (1.0 / n) - 1e-9))
    while m ** n < n_agents:
        m += 1
    axis = np.linspace(-half_width, half_width, m) if m > 1 else np.zeros(1)
    pts = np.array(list(itertools.product(axis, repeat=n)))
    # Interleave so small N still covers the box rather than one edge.
    order = np.argsort([(k * 0.6180339887498949) % 1.0 for k in range(len(pts))], kind="stable")
    return pts[order[:n_agents]]
