"""Decentralized k-hop prescribed performance state and input observers.

Each estimator works from a :class:`LocalView`, the messages its 1-hop
neighbors sent it during the current instant. Everything here acts
componentwise, so vectors of any dimension are accepted.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .funnel import clamp_normalized, transform, transform_jacobian
from .graph import EXTENDED, STANDARD, Graph, disagreement_matrix, khop_neighbors


class ProtocolError(KeyError):
    """A quantity the disagreement needs was not received from a 1-hop neighbor."""


class ObserverVariant(enum.Enum):
    FULL = "full"
    NO_INPUT_OBSERVER = "no_input_observer"
    NO_DRIFT = "no_drift"
    NO_DRIFT_NO_INPUT = "no_drift_no_input"

    @property
    def uses_drift(self) -> bool:
        return self in (ObserverVariant.FULL, ObserverVariant.NO_INPUT_OBSERVER)

    @property
    def uses_input(self) -> bool:
        return self in (ObserverVariant.FULL, ObserverVariant.NO_DRIFT)


@dataclass
class EstimateSlot:
    estimator: int
    target: int
    x_hat: np.ndarray
    g_hat: np.ndarray


@dataclass
class LocalView:
    """What ``estimator`` knows about ``target`` at one instant.

    ``peer_estimates[l]`` is neighbor l's estimate of the target;
    ``relayed_truth[l]`` is the target's true value as reported by l (in
    extended mode the estimator reports it to itself when adjacent).
    """

    estimator: int
    own: np.ndarray
    peer_estimates: Mapping = field(default_factory=dict)
    relayed_truth: Mapping = field(default_factory=dict)


def peer_set(g: Graph, target: int, estimator: int, k: int, mode: str = STANDARD) -> tuple:
    """Neighbors of the estimator that also estimate the target."""
    members = set(khop_neighbors(g, target, k, mode).members)
    return tuple(sorted(g.neighbors(estimator) & members))


def relay_set(g: Graph, target: int, estimator: int, mode: str = STANDARD) -> tuple:
    """Who supplies the target's true value to the estimator."""
    if mode == EXTENDED:
        return (estimator,) if estimator in g.neighbors(target) else ()
    return tuple(sorted(g.neighbors(estimator) & g.neighbors(target)))


def _disagreement(g, target, view, k, mode, what):
    own = np.asarray(view.own, dtype=float)
    dis = np.zeros_like(own)
    for l in peer_set(g, target, view.estimator, k, mode):
        try:
            dis += own - np.asarray(view.peer_estimates[l], dtype=float)
        except KeyError:
            raise ProtocolError(f"estimator {view.estimator} has no {what} estimate of {target} from {l}") from None
    for l in relay_set(g, target, view.estimator, mode):
        try:
            dis += own - np.asarray(view.relayed_truth[l], dtype=float)
        except KeyError:
            raise ProtocolError(f"estimator {view.estimator} has no relayed {what} of {target} from {l}") from None
    return dis


def state_disagreement(g: Graph, target: int, view: LocalView, k: int, mode: str = STANDARD) -> np.ndarray:
    """xi: sum over peers of (own - peer estimate) plus (own - relayed truth) per relayer."""
    return _disagreement(g, target, view, k, mode, "state")


def input_disagreement(g: Graph, target: int, view: LocalView, k: int, mode: str = STANDARD) -> np.ndarray:
    """mu: same construction as :func:`state_disagreement` on input-map estimates."""
    return _disagreement(g, target, view, k, mode, "input")


def gather_view(g: Graph, target: int, estimator: int, k: int, estimates: Mapping, truth, mode: str = STANDARD) -> LocalView:
    """Assemble the estimator's view from global bookkeeping, keeping only 1-hop messages.

    ``estimates`` maps estimator id -> its estimate of ``target``.
    """
    nbrs = g.neighbors(estimator)
    peers = {l: estimates[l] for l in nbrs if l in estimates}
    relayed = {l: truth for l in relay_set(g, target, estimator, mode)}
    return LocalView(estimator, estimates[estimator], peers, relayed)


@dataclass(frozen=True)
class DisagreementState:
    xi: np.ndarray
    e: np.ndarray
    eps: np.ndarray
    mu: np.ndarray | None = None
    q: np.ndarray | None = None
    nu: np.ndarray | None = None
    clamps: int = 0


def disagreement_state(xi, rho, mu=None, omega=None) -> DisagreementState:
    xi = np.asarray(xi, dtype=float)
    e, clamps = clamp_normalized(xi / rho)
    q = nu = None
    if mu is not None:
        mu = np.asarray(mu, dtype=float)
        q, c2 = clamp_normalized(mu / omega)
        nu = transform(q)
        clamps += c2
    return DisagreementState(xi, e, transform(e), mu, q, nu, clamps)


def correction(e, bound) -> np.ndarray:
    """-bound^-1 * J_T(e) * T(e), the funnel-driven correction term."""
    return -transform_jacobian(e) * transform(e) / bound


def ppso_derivative(slot: EstimateSlot, dis: DisagreementState, rho, variant=ObserverVariant.FULL,
                    drift: Callable | None = None) -> np.ndarray:
    """Time derivative of the state estimate held in ``slot``."""
    out = correction(dis.e, rho)
    if variant.uses_drift:
        if drift is None:
            raise ValueError(f"{variant.value} observer needs the target's drift")
        out = out + drift(np.asarray(slot.x_hat, dtype=float))
    if variant.uses_input:
        out = out + slot.g_hat
    return out


def ppio_derivative(slot: EstimateSlot, dis: DisagreementState, omega) -> np.ndarray:
    """Time derivative of the input-map estimate held in ``slot``."""
    if dis.q is None:
        raise ValueError("disagreement state carries no input disagreement")
    return correction(dis.q, omega)


def stacked_identity_check(g: Graph, target: int, k: int, x_hat: Mapping, x_true, g_hat: Mapping | None = None,
                           g_true=None, mode: str = STANDARD) -> tuple:
    """Infinity-norm residuals of xi_stack - M tilde_x and mu_stack - M tilde_g.

    The left sides come from the local per-estimator formula, the right
    sides from the assembled disagreement matrix.
    """
    nb = khop_neighbors(g, target, k, mode)
    M = disagreement_matrix(g, nb).M

    def residual(est, truth):
        truth = np.atleast_1d(np.asarray(truth, dtype=float))
        local = np.array([
            np.atleast_1d(state_disagreement(g, target, gather_view(g, target, j, k, est, truth, mode), k, mode))
            for j in nb.members
        ])
        err = np.array([np.atleast_1d(est[j]) - truth for j in nb.members])
        return float(np.max(np.abs(local - M @ err)))

    res_x = residual(x_hat, x_true)
    res_g = residual(g_hat, g_true) if g_hat is not None else 0.0
    return res_x, res_g
