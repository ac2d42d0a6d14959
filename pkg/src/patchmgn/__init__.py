"""Patch-trained mesh graph-network surrogates with Heun state updates."""

__version__ = "0.1.0"

from .integrators import IntegratorKind, step
from .mesh import Mesh, NodeType, Trajectory
from .partition import PartitionPlan, build_patch, build_patches, khop_ghost
from .surrogate import SurrogateConfig, SurrogateNet, init_params

__all__ = [
    "IntegratorKind",
    "Mesh",
    "NodeType",
    "PartitionPlan",
    "SurrogateConfig",
    "SurrogateNet",
    "Trajectory",
    "build_patch",
    "build_patches",
    "init_params",
    "khop_ghost",
    "step",
]
