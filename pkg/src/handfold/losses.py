"""Multi-stage joint loss and pose-estimation metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

THRESHOLD = 0.01


def smooth_l1_value(x: np.ndarray, variant: str = "kinked") -> np.ndarray:
    """Plain-numpy smooth-L1 (no graph), threshold 0.01."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    if variant == "kinked":
        return np.where(a < THRESHOLD, 0.5 * a, a - 0.005)
    if variant == "huber":
        return np.where(a < THRESHOLD, 50.0 * a * a, a - 0.005)
    raise ValueError(f"unknown smooth-L1 variant {variant!r}")


@dataclass
class LossReport:
    total: Tensor
    per_stage: list[float] = field(default_factory=list)

    @property
    def value(self) -> float:
        return float(self.total.data)


def joint_loss(stages: Sequence[Tensor], gt: np.ndarray, variant: str = "kinked") -> LossReport:
    """Sum over stages, joints and coordinates of smooth-L1; averaged over the batch.

    ``stages`` are B x J x 3 (or J x 3) estimates, ``gt`` has the same shape.
    """
    if len(stages) == 0:
        raise ValueError("joint_loss needs at least one stage")
    gt = np.asarray(gt)
    target = Tensor(gt)
    batch = gt.shape[0] if gt.ndim == 3 else 1
    total = None
    per_stage = []
    for est in stages:
        if est.shape != gt.shape:
            raise ValueError(f"joint_loss: estimate {est.shape} vs ground truth {gt.shape}")
        term = ad.scale(ad.sum_all(ad.smooth_l1(ad.sub(est, target), variant)), 1.0 / batch)
        per_stage.append(float(term.data))
        total = term if total is None else ad.add(total, term)
    return LossReport(total, per_stage)


def per_joint_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Euclidean distance per joint (last axis = xyz)."""
    return np.linalg.norm(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64), axis=-1)


def mean_distance_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean over joints (and frames, if batched) of the joint distance in mm."""
    return float(per_joint_errors(pred, gt).mean())


def frame_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-frame mean joint distance for F x J x 3 inputs."""
    return per_joint_errors(pred, gt).mean(axis=-1)


def success_rate_curve(errors: Sequence[float], thresholds: Sequence[float]) -> np.ndarray:
    """Fraction of frames whose mean error is below each threshold."""
    errors = np.asarray(errors, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.size == 0:
        raise ValueError("threshold list is empty")
    if errors.size == 0:
        raise ValueError("need at least one frame")
    return (errors[None, :] < thresholds[:, None]).mean(axis=1)


def write_curve_csv(path: str | Path, thresholds: Sequence[float], rates: Sequence[float]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold_mm", "success_rate"])
        for t, r in zip(thresholds, rates):
            w.writerow([f"{t:g}", f"{r:.6f}"])
