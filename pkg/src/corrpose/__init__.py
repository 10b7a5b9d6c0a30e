"""6D object pose estimation from attention-based point correspondence.

A framework-free pipeline: a minimal autodiff tensor engine, dual feature
disengagement/alignment modules, confidence-weighted direct pose
regression, iterative residual refinement, a classical least-squares
solver, the standard pose metrics, and a synthetic benchmark generator.
"""

from .autodiff import Tensor, backward
from .config import DataConfig, RunConfig, load_config
from .geometry import (
    PointCloud,
    Pose,
    SymmetrySpec,
    add_metric,
    adds_metric,
    arun_solve,
    auc,
    chamfer,
    rate_below,
)
from .losses import LossWeights
from .network import NetworkConfig, PoseNet
from .nn import ParameterStore
from .synthdata import ShapeSpec, default_shapes, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "ParameterStore",
    "Pose", "PointCloud", "SymmetrySpec",
    "arun_solve", "chamfer", "add_metric", "adds_metric", "auc", "rate_below",
    "LossWeights", "NetworkConfig", "PoseNet",
    "ShapeSpec", "default_shapes", "generate_dataset",
    "RunConfig", "DataConfig", "load_config",
    "__version__",
]
