"""Laplacian-regularized stratified model fitting."""

__version__ = "0.1.0"

from .graph import (
    StratGraph,
    cartesian_product,
    is_connected,
    laplacian,
    make_complete,
    make_cycle,
    make_grid,
    make_path,
    make_star,
    make_tree,
)
from .losses import make_loss
from .regularizers import Regularizer
from .solver import SolverConfig, fit, regularization_path
from .data import Dataset, read_dataset
from .model import StratifiedModel, bind_and_group, cross_validate, holdout_validate
from .store import load_model, save_model

__all__ = [
    "StratGraph",
    "cartesian_product",
    "is_connected",
    "laplacian",
    "make_complete",
    "make_cycle",
    "make_grid",
    "make_path",
    "make_star",
    "make_tree",
    "make_loss",
    "Regularizer",
    "SolverConfig",
    "fit",
    "regularization_path",
    "Dataset",
    "read_dataset",
    "StratifiedModel",
    "bind_and_group",
    "cross_validate",
    "holdout_validate",
    "load_model",
    "save_model",
]
