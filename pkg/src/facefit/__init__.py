"""Monocular facial performance fitting and reenactment conditioning.

Fits a linear 3D morphable model to tracked 2D landmark sequences with a
box-constrained batch solver, composes hybrid source/target trajectories for
reenactment, and renders deterministic conditioning images (normalized
mean-face coordinate images plus eye-gaze frames).
"""

from .camera import CameraParams, estimate_pose, project
from .conditioning import (
    BACKGROUND_ID,
    EYELID_COLOR,
    IRIS_COLOR,
    GazeFrame,
    VisibilityMask,
    encode_nmfc,
    load_gaze_frames,
    polygon_mask,
    rasterize,
    rasterize_projected,
    render_conditioning_sequence,
    render_gaze,
    save_gaze_frames,
    save_png,
)
from .errors import (
    ConfigError,
    DegenerateModelError,
    DegeneratePoseError,
    FaceFitError,
    FormatError,
    ValidationError,
)
from .fitting import (
    EnergyBreakdown,
    FitConfig,
    FitResult,
    LandmarkSequence,
    LinearSystem,
    ShapeTrajectory,
    assemble_linear_system,
    energy,
    fit_video,
    load_landmarks,
    load_trajectory,
    mean_reprojection_error,
    save_landmarks_csv,
    save_trajectory,
    solve_system,
)
from .model import (
    MorphableModel,
    ShapeParams,
    load_model,
    normalized_mean_face,
    save_model,
    synthesize_shape,
)
from .reenactment import (
    MAX_PIXEL_ERROR,
    adapt_gaze,
    compose_hybrid,
    per_pixel_error,
    save_heatmap,
    sequence_error,
    similarity_from_points,
)
from .solver import BoxLsqResult, solve_box_lsq
from .synthetic import make_synthetic_model, make_synthetic_performance

__version__ = "0.1.0"

__all__ = [
    "BACKGROUND_ID",
    "BoxLsqResult",
    "CameraParams",
    "ConfigError",
    "DegenerateModelError",
    "DegeneratePoseError",
    "EnergyBreakdown",
    "EYELID_COLOR",
    "FaceFitError",
    "FitConfig",
    "FitResult",
    "FormatError",
    "GazeFrame",
    "IRIS_COLOR",
    "LandmarkSequence",
    "LinearSystem",
    "MAX_PIXEL_ERROR",
    "MorphableModel",
    "ShapeParams",
    "ShapeTrajectory",
    "ValidationError",
    "VisibilityMask",
    "adapt_gaze",
    "assemble_linear_system",
    "compose_hybrid",
    "encode_nmfc",
    "energy",
    "estimate_pose",
    "fit_video",
    "load_gaze_frames",
    "load_landmarks",
    "load_model",
    "load_trajectory",
    "make_synthetic_model",
    "make_synthetic_performance",
    "mean_reprojection_error",
    "normalized_mean_face",
    "per_pixel_error",
    "polygon_mask",
    "project",
    "rasterize",
    "rasterize_projected",
    "render_conditioning_sequence",
    "render_gaze",
    "save_gaze_frames",
    "save_heatmap",
    "save_png",
    "save_landmarks_csv",
    "save_model",
    "save_trajectory",
    "sequence_error",
    "similarity_from_points",
    "solve_box_lsq",
    "solve_system",
    "synthesize_shape",
]
