"""Learned two-view outlier rejection with soft-threshold noise filtering.

Subpackages:

- ``diffcore``: minimal reverse-mode autodiff on float64 arrays.
- ``geometry``: epipolar algebra, weighted eight-point, pose metrics.
- ``datagen``: synthetic two-view scene and correspondence generation.
- ``model``: the filtering network, loss, and checkpoints.
- ``pipeline``: RANSAC baseline, evaluation metrics, training loop.
- ``cli``: command-line entry point (``fnnet``).
"""

from . import datagen, diffcore, geometry, model, pipeline

__version__ = "0.1.0"

__all__ = ["datagen", "diffcore", "geometry", "model", "pipeline", "__version__"]
