"""Heteroscedastic regression, variance attribution, and benchmarks for
uncertainty explanations."""

from . import bench, datagen, explain, hetreg, metrics, nncore, rng

__version__ = "0.1.0"

__all__ = ["bench", "datagen", "explain", "hetreg", "metrics", "nncore", "rng"]
