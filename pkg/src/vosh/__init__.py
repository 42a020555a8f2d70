"""Voxel-mesh hybrid radiance fields: fitting, baking, and rendering."""

from .field import F_DIM, contract, compute_weights, accumulate_deferred
from .mlp import MlpHead, mlp_view_color

__all__ = [
    "F_DIM",
    "contract",
    "compute_weights",
    "accumulate_deferred",
    "MlpHead",
    "mlp_view_color",
]

__version__ = "0.1.0"
