"""Exponential performance funnels, the log transformation, and funnel-bank design."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# e is clamped into [-1 + EPS_M, 1 - EPS_M] before T and J_T.
EPS_M = 1e-9
DEFAULT_SAFETY = 0.95


class InfeasibleInitializationError(ValueError):
    """Initial disagreement is not strictly inside the funnel."""

    def __init__(self, message, component=None, required=None):
        super().__init__(message)
        self.component = component
        self.required = required


@dataclass(frozen=True)
class Funnel:
    """rho(t) = (rho0 - rho_inf) * exp(-decay * t) + rho_inf."""

    rho0: float
    rho_inf: float
    decay: float

    def __post_init__(self):
        if not (np.isfinite(self.rho0) and np.isfinite(self.rho_inf) and np.isfinite(self.decay)):
            raise ValueError("funnel parameters must be finite")
        if self.rho_inf <= 0:
            raise ValueError(f"rho_inf must be positive, got {self.rho_inf}")
        if self.rho0 < self.rho_inf:
            raise ValueError(f"rho0={self.rho0} below rho_inf={self.rho_inf}")
        if self.decay <= 0:
            raise ValueError(f"decay must be positive, got {self.decay}")

    @classmethod
    def from_gap(cls, gap: float, rho_inf: float, decay: float) -> "Funnel":
        """Build from the ``gap * exp(-decay t) + rho_inf`` form."""
        return cls(gap + rho_inf, rho_inf, decay)

    @classmethod
    def constant(cls, c: float) -> "Funnel":
        return cls(c, c, 1.0)

    @property
    def gap(self) -> float:
        return self.rho0 - self.rho_inf

    @property
    def bound(self) -> float:
        return self.rho0

    @property
    def derivative_bound(self) -> float:
        return self.decay * self.gap

    def value(self, t):
        return self.gap * np.exp(-self.decay * np.asarray(t, dtype=float)) + self.rho_inf

    def derivative(self, t):
        return -self.decay * self.gap * np.exp(-self.decay * np.asarray(t, dtype=float))

    def scaled(self, s: float) -> "Funnel":
        return Funnel(s * self.rho0, s * self.rho_inf, self.decay)

    def as_tuple(self) -> tuple:
        return (self.rho0, self.rho_inf, self.decay)


def funnel_value(f: Funnel, t):
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be nonnegative")
    return f.value(t)


def funnel_derivative(f: Funnel, t):
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be nonnegative")
    return f.derivative(t)


def clamp_normalized(e):
    """Clamp into the open unit interval; returns (clamped, number of clamped entries)."""
    e = np.asarray(e, dtype=float)
    lim = 1.0 - EPS_M
    hit = np.abs(e) > lim
    return np.clip(e, -lim, lim), int(np.count_nonzero(hit))


def transform(e):
    """T(e) = ln((1 + e) / (1 - e)) = 2 atanh(e), strictly increasing, odd."""
    e, _ = clamp_normalized(e)
    return 2.0 * np.arctanh(e)


def transform_jacobian(e):
    """dT/de = 2 / (1 - e^2)."""
    e, _ = clamp_normalized(e)
    return 2.0 / (1.0 - e * e)


@dataclass(frozen=True)
class FunnelBank:
    """Funnels of one estimation target, ordered neighbor-major then component.

    ``target_bound`` is the error funnel (delta or theta) the bank certifies
    through ``norm(t) <= lambda_min * target_bound(t)``.
    """

    funnels: tuple
    target_bound: Funnel
    lambda_min: float
    eta: int
    n: int

    def __post_init__(self):
        if len(self.funnels) == 0:
            raise ValueError("empty funnel bank")
        if len(self.funnels) != self.eta * self.n:
            raise ValueError(f"expected {self.eta * self.n} funnels, got {len(self.funnels)}")

    def values(self, t) -> np.ndarray:
        """Shape (len(funnels),) + shape(t)."""
        return np.stack([f.value(t) for f in self.funnels])

    def derivatives(self, t) -> np.ndarray:
        return np.stack([f.derivative(t) for f in self.funnels])

    def norm(self, t):
        return np.linalg.norm(self.values(t), axis=0)

    def certificate_slack(self, t):
        """lambda_min * delta(t) - ||rho_vec(t)||; nonnegative where certified."""
        return self.lambda_min * self.target_bound.value(t) - self.norm(t)

    def initial(self) -> np.ndarray:
        return np.array([f.rho0 for f in self.funnels])


def check_feasible(initial_bound, dis0, names=None) -> None:
    """Raise unless |dis0| < initial_bound componentwise."""
    dis0 = np.abs(np.ravel(np.asarray(dis0, dtype=float)))
    initial_bound = np.broadcast_to(np.ravel(np.asarray(initial_bound, dtype=float)), dis0.shape)
    bad = np.flatnonzero(dis0 >= initial_bound)
    if bad.size:
        j = int(bad[0])
        name = names[j] if names is not None else f"component {j}"
        raise InfeasibleInitializationError(
            f"{name}: |disagreement(0)|={dis0[j]:.6g} >= funnel(0)={initial_bound[j]:.6g}",
            component=j,
        )


def design_funnel_bank(M, delta: Funnel, eta: int, n: int, xi0, safety: float = DEFAULT_SAFETY) -> FunnelBank:
    """Uniform funnels rho = safety * lambda_min * delta / sqrt(eta * n).

    ``M`` is a DisagreementMatrix or a plain lambda_min. ``xi0`` holds the
    initial disagreements, eta*n of them in bank order.
    """
    lam = float(getattr(M, "lambda_min", M))
    if not lam > 0:
        raise ValueError(f"lambda_min must be positive, got {lam}")
    if not 0 < safety <= 1:
        raise ValueError("safety factor must lie in (0, 1]")
    scale = safety * lam / np.sqrt(eta * n)
    rho = delta.scaled(scale)
    xi0 = np.ravel(np.asarray(xi0, dtype=float))
    if xi0.size != eta * n:
        raise ValueError(f"xi0 must have {eta * n} entries, got {xi0.size}")
    bad = np.flatnonzero(np.abs(xi0) >= rho.rho0)
    if bad.size:
        j = int(bad[np.argmax(np.abs(xi0[bad]))])
        need = np.abs(xi0[j]) / scale
        raise InfeasibleInitializationError(
            f"component {j} (neighbor {j // n}, state {j % n}): |xi(0)|={abs(xi0[j]):.6g} >= "
            f"rho(0)={rho.rho0:.6g}; needs delta(0) > {need:.6g}",
            component=j,
            required=need,
        )
    return FunnelBank(tuple([rho] * (eta * n)), delta, lam, eta, n)


def ppf_norm_is_ppf(bank: FunnelBank, sample_times) -> bool:
    """Numerically check that ||rho_vec(t)|| is itself a performance function on the grid."""
    t = np.asarray(sample_times, dtype=float)
    vals = bank.values(t)
    ders = bank.derivatives(t)
    norm = np.linalg.norm(vals, axis=0)
    if not np.all(np.isfinite(norm)) or np.any(norm <= 0):
        return False
    upper = np.sqrt(sum(f.bound ** 2 for f in bank.funnels))
    if np.any(norm > upper * (1 + 1e-12)):
        return False
    dnorm = np.sum(vals * ders, axis=0) / norm
    dbound = np.sqrt(sum(f.derivative_bound ** 2 for f in bank.funnels))
    # |rho^T rho_dot| / ||rho|| <= ||rho_dot|| <= sqrt(sum of squared derivative bounds)
    return bool(np.all(np.abs(dnorm) <= dbound * (1 + 1e-12)))
