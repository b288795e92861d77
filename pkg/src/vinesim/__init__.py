"""2D vine robot simulator: rigid-body chain with pin/prismatic joints, QP time stepping
with contact, and batch estimation of joint stiffness and damping from point trajectories."""

from .environment import Circle, HalfPlane, RoundedPolygon, Scene, validate_scene
from .fitting import FitProblem, FitResult, ReferenceTrajectory, fit, project_reference
from .model import ModelSpec, RobotState, VineModel, build_model, initial_state
from .stepper import SimConfig, SimulationError, Stepper, simulate, step

__version__ = "0.1.0"

__all__ = [
    "Circle",
    "FitProblem",
    "FitResult",
    "HalfPlane",
    "ModelSpec",
    "ReferenceTrajectory",
    "RobotState",
    "RoundedPolygon",
    "Scene",
    "SimConfig",
    "SimulationError",
    "Stepper",
    "VineModel",
    "build_model",
    "fit",
    "initial_state",
    "project_reference",
    "simulate",
    "step",
    "validate_scene",
]
