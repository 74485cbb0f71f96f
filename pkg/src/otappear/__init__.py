"""Geometry-aware optimal-transport appearance transfer."""

__version__ = "0.1.0"

from otappear.image_io import GeometryMaps, ImageBuffer, load_image, save_image
from otappear.features import (
    WeightedPointCloud,
    build_augmented_features,
    quantize_to_cloud,
)
from otappear.solvers import (
    CostMatrix,
    TransportPlan,
    cost_matrix,
    exact_ot_small,
    plan_cost,
    sinkhorn,
)
from otappear.transfer import TransferOptions, TransferReport, transfer_appearance

__all__ = [
    "CostMatrix",
    "GeometryMaps",
    "ImageBuffer",
    "TransferOptions",
    "TransferReport",
    "TransportPlan",
    "WeightedPointCloud",
    "build_augmented_features",
    "cost_matrix",
    "exact_ot_small",
    "load_image",
    "plan_cost",
    "quantize_to_cloud",
    "save_image",
    "sinkhorn",
    "transfer_appearance",
]
