"""Decentralized k-hop prescribed performance state and input observers."""
from .funnel import Funnel, FunnelBank, InfeasibleInitializationError, design_funnel_bank, transform, transform_jacobian
from .graph import EXTENDED, STANDARD, Graph, disagreement_matrix, is_connected, khop_neighbors, load_edge_list
from .observer import ObserverVariant
from .plant import AgentModel, Controller, Drift, InputMap
from .sim import Scenario, Trajectory, build_network, finite_difference_audit, run, step

__version__ = "0.1.0"

__all__ = [
    "EXTENDED", "STANDARD", "AgentModel", "Controller", "Drift", "Funnel", "FunnelBank", "Graph",
    "InfeasibleInitializationError", "InputMap", "ObserverVariant", "Scenario", "Trajectory",
    "build_network", "design_funnel_bank", "disagreement_matrix", "finite_difference_audit",
    "is_connected", "khop_neighbors", "load_edge_list", "run", "step", "transform", "transform_jacobian",
]
