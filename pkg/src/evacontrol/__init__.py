"""Crowd evacuation with controlled agents: simulation, discrete adjoint and optimal control."""

from .adjoint import ReducedProblem, backward_sweep, gradient, objective_eval, tangent_sweep
from .forward import ControlGrid, Discretization, ForwardError, forward_sweep, solve_eikonal
from .mesh import RoomSpec, Exit, TriMesh, cfl_max_tau, compute_geometry, generate_room
from .model import BumpKernel, ModelParams, MorseKernel
from .optimize import project_c, project_controls, project_u, projected_gradient
from .scenario import ConfigError, Scenario, ScenarioConfig, build, load_config, preset

__version__ = "0.1.0"

__all__ = [
    "BumpKernel", "ConfigError", "ControlGrid", "Discretization", "Exit", "ForwardError", "ModelParams",
    "MorseKernel", "ReducedProblem", "RoomSpec", "Scenario", "ScenarioConfig", "TriMesh", "backward_sweep",
    "build", "cfl_max_tau", "compute_geometry", "forward_sweep", "generate_room", "gradient", "load_config",
    "objective_eval", "preset", "project_c", "project_controls", "project_u", "projected_gradient",
    "solve_eikonal", "tangent_sweep",
]
