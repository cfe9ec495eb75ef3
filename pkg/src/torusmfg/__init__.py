"""Discounted potential mean-field games on the flat torus.

Fourier-spectral solvers for the stationary and time-dependent systems,
measure functionals (entropy, Fisher information, W1), and diagnostics for
the Lyapunov functional along equilibrium flows.
"""

from .coupling import (
    FourierKernel,
    ModelParams,
    critical_coupling,
    free_energy,
    heat_flow_criterion,
    interaction_cost,
    lambda_upper_bound,
    potential_energy,
)
from .errors import (
    BlowUpError,
    ConfigError,
    ConvergenceError,
    DegenerateDensityError,
    DensityFormatError,
    GridError,
    KernelError,
    TorusMFGError,
)
from .flow import FlowTrajectory, PicardOptions, TimeMesh, solve_fp_forward, solve_hjb_backward, solve_mfg
from .grid import TorusGrid, read_field, write_field
from .stationary import StationaryConfig, StationarySolution, solve_stationary_mfg

__version__ = "0.1.0"

__all__ = [
    "BlowUpError",
    "ConfigError",
    "ConvergenceError",
    "DegenerateDensityError",
    "DensityFormatError",
    "FlowTrajectory",
    "FourierKernel",
    "GridError",
    "KernelError",
    "ModelParams",
    "PicardOptions",
    "StationaryConfig",
    "StationarySolution",
    "TimeMesh",
    "TorusGrid",
    "TorusMFGError",
    "critical_coupling",
    "free_energy",
    "heat_flow_criterion",
    "interaction_cost",
    "lambda_upper_bound",
    "potential_energy",
    "read_field",
    "solve_fp_forward",
    "solve_hjb_backward",
    "solve_mfg",
    "solve_stationary_mfg",
    "write_field",
]
