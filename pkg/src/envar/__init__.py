"""Energy-variational solutions: certified time stepping, verification and probes."""

from .core import ContractViolation, DomainError, SystemDescription, TestPath, Trajectory
from .saddle import DualBall, PolyhedralWeight, solve_saddle
from .stepper import SolverConfig, StepFailure, advance, run
from .verify import ResidualReport, reconstruct_min_defect, select_min_functional, verify

__all__ = [
    "ContractViolation",
    "DomainError",
    "DualBall",
    "PolyhedralWeight",
    "ResidualReport",
    "SolverConfig",
    "StepFailure",
    "SystemDescription",
    "TestPath",
    "Trajectory",
    "advance",
    "reconstruct_min_defect",
    "run",
    "select_min_functional",
    "solve_saddle",
    "verify",
]
