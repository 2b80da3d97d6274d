"""Multigraph GNN surrogate for unbalanced three-phase distribution power flow."""

__version__ = "0.1.0"

from .dss import CircuitSpec, parse_file, parse_path
from .grid import ControlState, MultiGraph, build_multigraph, feature_matrices, make_batch, phase_adjacency
from .solver import PFSolution, SolverConfig, power_balance_residual, radial_order, solve

__all__ = [
    "CircuitSpec",
    "ControlState",
    "MultiGraph",
    "PFSolution",
    "SolverConfig",
    "build_multigraph",
    "feature_matrices",
    "make_batch",
    "parse_file",
    "parse_path",
    "phase_adjacency",
    "power_balance_residual",
    "radial_order",
    "solve",
]
