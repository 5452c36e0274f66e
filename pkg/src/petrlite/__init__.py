"""Multi-view 3D detection with 3D position embeddings, on a numpy autodiff engine."""

import os

# BLAS sizes its thread pool when numpy first loads, so the cap must be set here.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, os.environ.get("PETR_THREADS", "1"))
del _var

from .diffarray import DiffArray, Tape, backward, constant, no_grad, parameter
from .errors import (ConfigError, ContractError, DimensionError, GeometryError, ParameterError,
                     PetrError, TrainingDiverged)
from .geometry import CameraRig, RoI, make_depth_bins
from .model import PETR, ModelConfig
from .scenegen import Box3D, Scene, make_ring_rig, render, sample_scene

__version__ = "0.1.0"

__all__ = [
    "DiffArray", "Tape", "backward", "constant", "no_grad", "parameter",
    "ConfigError", "ContractError", "DimensionError", "GeometryError", "ParameterError",
    "PetrError", "TrainingDiverged",
    "CameraRig", "RoI", "make_depth_bins", "PETR", "ModelConfig",
    "Box3D", "Scene", "make_ring_rig", "render", "sample_scene",
]
