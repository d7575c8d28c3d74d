"""Densification of semi-dense SLAM keyframes with multispectral photometric stereo.

A single RGB image taken under three colored lights gives per-pixel normals
once a mixing matrix per chromaticity segment is known; the matrices are fit
against normals derived from the SLAM depth, the normals are fused with the
depth by sparse least squares, and per-keyframe clouds are registered and
merged with ICP.
"""

from .core import (
    CameraIntrinsics,
    CameraPose,
    DepthMap,
    InverseDepthMap,
    MultispectralImage,
    NormalMap,
    PointCloud,
    pose_apply,
    pose_compose,
    pose_inverse,
    quat_to_rotation,
)
from .exceptions import (
    AllInvalid,
    DegenerateCorrespondences,
    DegeneratePriors,
    DimensionMismatch,
    EmptyInput,
    InputValidationError,
    InsufficientOverlap,
    InsufficientPriors,
    MpsFusionError,
    NonPositiveScale,
    NonUnitQuaternion,
    SingularMixing,
    SolverDiverged,
)
from .fusion import FusedSurface, FusionConfig, PositionNormalFusion
from .icp import IcpConfig, IterativeClosestPoint, Registration, icp_register, merge_clouds
from .ingest import KeyframeBundle
from .mps import ChromaticitySegmenter, MultispectralPhotometricStereo
from .pipeline import MetricsReport, PipelineConfig, evaluate, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "AllInvalid",
    "CameraIntrinsics",
    "CameraPose",
    "ChromaticitySegmenter",
    "DegenerateCorrespondences",
    "DegeneratePriors",
    "DepthMap",
    "DimensionMismatch",
    "EmptyInput",
    "FusedSurface",
    "FusionConfig",
    "IcpConfig",
    "InputValidationError",
    "InsufficientOverlap",
    "InsufficientPriors",
    "InverseDepthMap",
    "IterativeClosestPoint",
    "KeyframeBundle",
    "MetricsReport",
    "MpsFusionError",
    "MultispectralImage",
    "MultispectralPhotometricStereo",
    "NonPositiveScale",
    "NonUnitQuaternion",
    "NormalMap",
    "PipelineConfig",
    "PointCloud",
    "PositionNormalFusion",
    "Registration",
    "SingularMixing",
    "SolverDiverged",
    "evaluate",
    "icp_register",
    "merge_clouds",
    "pose_apply",
    "pose_compose",
    "pose_inverse",
    "quat_to_rotation",
    "run_pipeline",
]
