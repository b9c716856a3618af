"""occulift: segment-anything-to-3D target object reconstruction.

Lifts 2D masks from a promptable segmenter into a 3D occupancy field over
posed multi-view images, then finetunes SDF, color, and feature voxel
fields on the segmented target.
"""

from .fields import BoundaryGradient, VoxelGrid, make_sphere_sdf_grid
from .geometry import Camera, NoIntersection, Ray, generate_ray, ray_aabb
from .lifting import InitialSegmentationFailed, LiftingConfig, LiftingState, iterate_lifting
from .masks import EmptyMask, Mask, mask_iou
from .meshmetrics import MetricReport, TriangleMesh, chamfer, marching_cubes, psnr, ssim
from .prompts import PromptSet, make_prompts
from .render import RenderWeights, compose_weights, render_weights_from_sdf, sdf_to_alpha
from .scenes import AnalyticScene, SceneDataset, generate_synthetic_dataset, load_dataset
from .segmenter import (
    CorruptionModel,
    ExternalSegmenter,
    OracleSegmenter,
    SegmentationFailed,
    SegmenterUnavailable,
    SegmentRequest,
    SegmentResponse,
)
from .distill import LossWeights, NonFiniteLoss, TrainConfig, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "AnalyticScene",
    "BoundaryGradient",
    "Camera",
    "CorruptionModel",
    "EmptyMask",
    "ExternalSegmenter",
    "InitialSegmentationFailed",
    "LiftingConfig",
    "LiftingState",
    "LossWeights",
    "Mask",
    "MetricReport",
    "NoIntersection",
    "NonFiniteLoss",
    "OracleSegmenter",
    "PromptSet",
    "Ray",
    "RenderWeights",
    "SceneDataset",
    "SegmentRequest",
    "SegmentResponse",
    "SegmentationFailed",
    "SegmenterUnavailable",
    "TrainConfig",
    "TriangleMesh",
    "VoxelGrid",
    "chamfer",
    "compose_weights",
    "finetune",
    "generate_ray",
    "generate_synthetic_dataset",
    "iterate_lifting",
    "load_dataset",
    "make_prompts",
    "make_sphere_sdf_grid",
    "marching_cubes",
    "mask_iou",
    "pretrain",
    "psnr",
    "ray_aabb",
    "render_weights_from_sdf",
    "sdf_to_alpha",
    "ssim",
]
