"""Point-annotation supervision toolkit for density-based counting."""

from .geometry import (
    PointSet,
    SigmaAssignment,
    estimate_sigma_gak,
    estimate_sigma_nonuniform,
    fixed_sigma,
    knn_distances,
    sigma_error,
    sigma_from_boxes,
)
from .losses import (
    LossValue,
    LossWeights,
    density_regression_loss,
    global_density_loss,
    seg_focal_loss,
    total_loss,
)
from .metrics import count_errors, evaluate_maps, game, psnr_ssim, stratify
from .supervision import (
    DensityMap,
    GlobalDensityLabel,
    GlobalDensitySpec,
    SegmentationMap,
    compute_step_size,
    density_label,
    rasterize_density,
    rasterize_segmentation,
    read_density,
    write_density,
)
from .synthdata import SceneSpec, generate

__all__ = [
    "PointSet",
    "SigmaAssignment",
    "estimate_sigma_gak",
    "estimate_sigma_nonuniform",
    "fixed_sigma",
    "knn_distances",
    "sigma_error",
    "sigma_from_boxes",
    "LossValue",
    "LossWeights",
    "density_regression_loss",
    "global_density_loss",
    "seg_focal_loss",
    "total_loss",
    "count_errors",
    "evaluate_maps",
    "game",
    "psnr_ssim",
    "stratify",
    "DensityMap",
    "GlobalDensityLabel",
    "GlobalDensitySpec",
    "SegmentationMap",
    "compute_step_size",
    "density_label",
    "rasterize_density",
    "rasterize_segmentation",
    "read_density",
    "write_density",
    "SceneSpec",
    "generate",
]
