"""Non-neural machinery of a feed-forward metric 3D reconstruction system."""

from .geometry import (DegenerateError, PoseDistanceParams, Quat, Sim3Pose, compose, inverse,
                       kabsch_umeyama, pose_distance, slerp, weighted_quat_mean)
from .metrics import ate_rmse, depth_metrics, recon_metrics, relpose_accuracy
from .oracle import OracleConfig, SyntheticPredictor, synth_scene
from .scale import ScaleUnobservable, roe_scale
from .sfm import SfmConfig, run_sfm
from .voxel import CurveKind, PointFeatureCloud, run_backend, voxelize
from .vo import GlobalMap, VisualOdometry, VoConfig

__all__ = [
    "DegenerateError",
    "PoseDistanceParams",
    "Quat",
    "Sim3Pose",
    "compose",
    "inverse",
    "kabsch_umeyama",
    "pose_distance",
    "slerp",
    "weighted_quat_mean",
    "ate_rmse",
    "depth_metrics",
    "recon_metrics",
    "relpose_accuracy",
    "OracleConfig",
    "SyntheticPredictor",
    "synth_scene",
    "ScaleUnobservable",
    "roe_scale",
    "SfmConfig",
    "run_sfm",
    "CurveKind",
    "PointFeatureCloud",
    "run_backend",
    "voxelize",
    "GlobalMap",
    "VisualOdometry",
    "VoConfig",
]

__version__ = "0.1.0"
