"""Normalized solutions of a biharmonic Schroedinger equation with mixed
dispersion and Sobolev critical growth, on radial grids."""

from .constants import ProblemParams, best_constants, thresholds
from .functional import energy, fiber_coefficients, fiber_energy, project_pohozaev
from .grid import RadialField, make_grid
from .solvers import SolverConfig, genus_family, minimize_subcritical, mountain_pass_supercritical

__version__ = "0.1.0"

__all__ = [
    "ProblemParams",
    "RadialField",
    "SolverConfig",
    "best_constants",
    "energy",
    "fiber_coefficients",
    "fiber_energy",
    "genus_family",
    "make_grid",
    "minimize_subcritical",
    "mountain_pass_supercritical",
    "project_pohozaev",
    "thresholds",
]
