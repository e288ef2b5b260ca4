"""3D artistic glyph synthesis as optimized Gaussian clouds.

Pipeline: lift a 2D glyph (with per-component style images and heatmaps)
into a 3D Gaussian slab, then optimize it with component-wise
score-distillation gradients from a pluggable guidance provider, with
densify/prune maintenance and heatmap-driven component reassignment.
"""

from .camera import Camera, front_camera, look_at, turntable_cameras
from .cloud import GaussianCloud, Gaussian3D, UNASSIGNED
from .config import PipelineConfig, load_config, parse_config
from .dca import ComponentLabelMap, assign_gaussians, build_label_map
from .errors import (
    BehindCamera,
    ConfigError,
    DegenerateCovariance,
    EmptyComponent,
    EmptyMask,
    GlyphSplatError,
    NoTarget,
    ProviderFailure,
    ShapeMismatch,
    StaleForward,
    ZeroMass,
)
from .glyph2cloud import (
    BlendSchedule,
    ComponentHeatmap,
    GlyphImage,
    fallback_segment,
    lift_to_cloud,
    sample_foreground,
    threshold_heatmap,
)
from .guidance import ExternalGuidance, GuidanceRequest, GuidanceResponse, OracleGuidance
from .metrics import silhouette_iou, view_consistency
from .optimizer import (
    CameraSchedule,
    DensifyConfig,
    OptimizationConfig,
    densify_prune,
    lambdas_from_areas,
    run_optimization,
    sample_camera,
    sds_step,
)
from .pipeline import (
    cmd_assign,
    cmd_export,
    cmd_init,
    cmd_metrics,
    cmd_optimize,
    cmd_render,
)
from .ply import load_ply, save_ply
from .rasterizer import RenderSettings, RenderedImage, Rasterizer, render

__version__ = "0.1.0"

__all__ = [
    "BehindCamera",
    "BlendSchedule",
    "Camera",
    "CameraSchedule",
    "ComponentHeatmap",
    "ComponentLabelMap",
    "ConfigError",
    "DegenerateCovariance",
    "DensifyConfig",
    "EmptyComponent",
    "EmptyMask",
    "ExternalGuidance",
    "Gaussian3D",
    "GaussianCloud",
    "GlyphImage",
    "GlyphSplatError",
    "GuidanceRequest",
    "GuidanceResponse",
    "NoTarget",
    "OptimizationConfig",
    "OracleGuidance",
    "PipelineConfig",
    "ProviderFailure",
    "Rasterizer",
    "RenderSettings",
    "RenderedImage",
    "ShapeMismatch",
    "StaleForward",
    "UNASSIGNED",
    "ZeroMass",
    "assign_gaussians",
    "build_label_map",
    "cmd_assign",
    "cmd_export",
    "cmd_init",
    "cmd_metrics",
    "cmd_optimize",
    "cmd_render",
    "densify_prune",
    "fallback_segment",
    "front_camera",
    "lambdas_from_areas",
    "lift_to_cloud",
    "load_config",
    "load_ply",
    "look_at",
    "parse_config",
    "render",
    "run_optimization",
    "sample_camera",
    "sample_foreground",
    "save_ply",
    "sds_step",
    "silhouette_iou",
    "threshold_heatmap",
    "turntable_cameras",
    "view_consistency",
    "__version__",
]
