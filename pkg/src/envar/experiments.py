"""Build systems, initial states and test families from a run configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import binormal as bn
from . import euler_korteweg as ek
from .core import SystemDescription, TestPath
from .io import ConfigError
from .stepper import SolverConfig


@dataclass
class Setup:
    system: SystemDescription
    initial: np.ndarray
    horizon: float
    steps: int
    family: list[TestPath]
    mass_or_length: Callable[[np.ndarray], float]
    solver: SolverConfig

    @property
    def tau(self) -> float:
        return self.horizon / self.steps


def solver_config(cfg: dict) -> SolverConfig:
    s = cfg["solver"]
    return SolverConfig(s["tol"], s["max_iter"], s["n_samples"], s["seed"], s["newton_tol"])


def build(cfg: dict) -> Setup:
    horizon, steps = float(cfg["horizon"]), int(cfg["steps"])
    tau = horizon / steps
    size, seed = cfg["family"]["size"], cfg["family"]["seed"]
    if cfg["system"] == "euler_korteweg_1d":
        p = cfg["euler_korteweg"]
        grid = ek.Grid1D(p["length"], p["n_nodes"])
        x = grid.x
        rho = p["rho_mean"] + p["rho_amplitude"] * np.cos(2 * math.pi * p["rho_mode"] * x / grid.length)
        m = p["momentum_amplitude"] * np.sin(math.pi * x / grid.length)
        u0, rho_bar = ek.initial_state(grid, rho, m)
        system = ek.make_system(grid, p["gamma"], rho_bar, p["n_modes"])
        family = ek.test_paths(system, horizon, tau, size, seed)
        disc = system.params["disc"]

        def total_mass(u: np.ndarray) -> float:
            return ek.mass(grid, disc.state(u))

        return Setup(system, u0, horizon, steps, family, total_mass, solver_config(cfg))
    p = cfg["binormal"]
    fields = bn.null_fields() + bn.vortex_fields(5, radius=p["radius"])
    system = bn.make_system(p["n_vertices"], fields=fields, resolution=p["weight_resolution"])
    u0 = bn.TranslatingCircle(p["radius"]).polygon(0.0, p["n_vertices"]).vertices.ravel()
    family = bn.test_paths(system, horizon, size, seed)
    data = system.params["data"]

    def length(u: np.ndarray) -> float:
        return float(np.sum(data.measure(u).lengths))

    return Setup(system, u0, horizon, steps, family, length, solver_config(cfg))


def check_step_count(setup: Setup) -> None:
    """Refuse step counts with ``N * Ktilde(0) >= T``-scaled bound."""
    zero = np.zeros(setup.system.test_dim)
    if setup.steps <= setup.system.reg_weight_aux(zero) * setup.horizon:
        raise ConfigError("/steps", "steps must exceed horizon times the auxiliary weight at zero")
