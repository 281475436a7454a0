"""Learn Lagrangian equations of motion from state trajectories or video."""

__version__ = "0.1.0"

from .dynamics import (
    coriolis_vector,
    euler_step,
    forward_dynamics,
    kinetic_energy,
    lagrangian,
    rk4_step,
    rollout,
)
from .nets import LagrangianModel
from .simulators import SystemSpec, generate_observations, generate_trajectories
from .training import TrainConfig, train
from .vision import AutoEncoder

__all__ = [
    "AutoEncoder",
    "LagrangianModel",
    "SystemSpec",
    "TrainConfig",
    "coriolis_vector",
    "euler_step",
    "forward_dynamics",
    "generate_observations",
    "generate_trajectories",
    "kinetic_energy",
    "lagrangian",
    "rk4_step",
    "rollout",
    "train",
]
