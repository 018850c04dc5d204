"""Skeleton-folding 3D hand pose estimation from depth point clouds, on a numpy autodiff engine."""
from .folding import HandFoldingNet, ModelConfig, count_flops, count_params
from .preprocess import CameraIntrinsics, PointFrame, preprocess_depth, preprocess_points
from .skeleton import SkeletonPrior, default_skeleton
from .synth import synth_hands
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "CameraIntrinsics", "HandFoldingNet", "ModelConfig", "PointFrame", "SkeletonPrior", "TrainConfig",
    "count_flops", "count_params", "default_skeleton", "load_checkpoint", "preprocess_depth",
    "preprocess_points", "save_checkpoint", "synth_hands", "train",
]
