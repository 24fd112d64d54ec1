"""Designed-porosity print protocols from simulated CT scans.

Modules: ``voxelcore`` (volumes and file format), ``phantom`` (designs and
the print simulator), ``segment`` (threshold and network segmentation),
``metrology`` (porosity, voids, roughness), ``predictor`` (porosity
regression network), ``recommend`` (setting search), ``pipeline`` and
``cli`` (end-to-end runs).
"""
from .voxelcore import Label, LabelMask, SliceImage, VoxelGrid, read_grid, write_grid
from .phantom import DefectModel, DesignSpec, ProcessParams, design_d1, design_d2, simulate_print, true_porosity
from .metrology import connected_components, porosity, roughness
from .predictor import Ensemble, MLPModel, MLPTrainConfig, forward, train
from .recommend import ParamSpace, enumerate_space, evaluate

__version__ = "0.1.0"
