"""Sparse linear inverse solvers and their unfolded, trainable networks."""

from . import algorithms, datagen, harness, networks, numerics, shrinkage, training
from .numerics import RngStream

__all__ = ["algorithms", "datagen", "harness", "networks", "numerics",
           "shrinkage", "training", "RngStream"]
__version__ = "0.1.0"
