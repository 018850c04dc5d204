"""Depth image -> normalized hand point cloud with surface normals.

The normalized frame is the hand's oriented bounding box (OBB): axes are the
principal components of the points, the origin is the box center and one
unit equals the longest box side, so every coordinate lies in [-0.5, 0.5].
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

DEPTH_MAGIC = b"DPTH"


class EmptyFrameError(ValueError):
    pass


class DegenerateFrameError(ValueError):
    pass


class DepthFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def project(self, points: np.ndarray) -> np.ndarray:
        """Camera-space mm -> (u, v) pixel coordinates."""
        p = np.asarray(points, dtype=np.float64)
        return np.stack([p[..., 0] * self.fx / p[..., 2] + self.cx,
                         p[..., 1] * self.fy / p[..., 2] + self.cy], axis=-1)


@dataclass
class NormalizationTransform:
    rotation: np.ndarray  # columns are the OBB axes in camera space
    centroid: np.ndarray  # OBB center, mm
    scale: float  # mm per normalized unit

    def normalize(self, points_mm: np.ndarray) -> np.ndarray:
        return (np.asarray(points_mm, dtype=np.float64) - self.centroid) @ self.rotation / self.scale

    def denormalize(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale @ self.rotation.T + self.centroid

    def camera_position(self) -> np.ndarray:
        """The camera origin expressed in normalized coordinates."""
        return self.normalize(np.zeros(3))


@dataclass
class PointFrame:
    points: np.ndarray  # N x 3 normalized
    normals: np.ndarray | None  # N x 3 unit
    transform: NormalizationTransform
    gt_joints: np.ndarray | None = None  # J x 3 normalized

    def check(self, tol: float = 1e-6) -> None:
        if np.abs(self.points).max() > 0.5 + tol:
            raise ValueError("points leave the [-0.5, 0.5] box")
        if self.normals is not None:
            lens = np.linalg.norm(self.normals, axis=1)
            if np.abs(lens - 1).max() > 1e-4:
                raise ValueError("normals are not unit length")
        r = self.transform.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0:
            raise ValueError("rotation is not a proper orthonormal matrix")


# ---------------------------------------------------------------------------
# depth file format


def write_depth(path: str | Path, depth: np.ndarray) -> None:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise DepthFormatError("depth image must be 2-D")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC + struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(depth, dtype="<u2").tobytes())


def read_depth(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != DEPTH_MAGIC:
        raise DepthFormatError(f"{path}: not a depth file (bad magic)")
    h, w = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 2 * h * w:
        raise DepthFormatError(f"{path}: payload size does not match {h}x{w}")
    return np.frombuffer(raw, dtype="<u2", offset=12).reshape(h, w).astype(np.uint16)


# ---------------------------------------------------------------------------
# geometry


def eigh_sym3(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigen-decomposition of a batch of symmetric 3x3 matrices.

    Returns eigenvalues in descending order and eigenvectors as columns.
    """
    A = np.array(a, dtype=np.float64)
    batch = A.shape[:-2]
    A = A.reshape(-1, 3, 3)
    V = np.broadcast_to(np.eye(3), A.shape).copy()
    ref = np.maximum(np.abs(A).reshape(len(A), -1).max(axis=1), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(A[:, 0, 1] ** 2 + A[:, 0, 2] ** 2 + A[:, 1, 2] ** 2)
        if np.all(off <= tol * ref):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = A[:, p, q]
            active = np.abs(apq) > 1e-300
            theta = np.where(active, (A[:, q, q] - A[:, p, p]) / (2 * np.where(active, apq, 1.0)), 0.0)
            t = np.where(active, np.sign(theta + (theta == 0)) / (np.abs(theta) + np.sqrt(theta ** 2 + 1)), 0.0)
            c = 1 / np.sqrt(t * t + 1)
            s = t * c
            J = np.broadcast_to(np.eye(3), A.shape).copy()
            J[:, p, p] = c
            J[:, q, q] = c
            J[:, p, q] = s
            J[:, q, p] = -s
            A = np.transpose(J, (0, 2, 1)) @ A @ J
            V = V @ J
    w = np.diagonal(A, axis1=1, axis2=2)
    order = np.argsort(-w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    return w.reshape(batch + (3,)), V.reshape(batch + (3, 3))


def depth_to_points(depth: np.ndarray, intrinsics: CameraIntrinsics, mask: np.ndarray | None = None) -> np.ndarray:
    """Back-project masked pixels to camera-space points in mm (u = column, v = row)."""
    depth = np.asarray(depth, dtype=np.float64)
    if mask is None:
        mask = depth > 0
    v, u = np.nonzero(mask)
    if len(u) == 0:
        raise EmptyFrameError("foreground mask is empty")
    d = depth[v, u]
    x = (u - intrinsics.cx) * d / intrinsics.fx
    y = (v - intrinsics.cy) * d / intrinsics.fy
    return np.stack([x, y, d], axis=1)


def foreground_mask(depth: np.ndarray, min_depth: float = 1.0, max_depth: float = np.inf,
                    center_depth: float | None = None, half_window: float = 150.0) -> np.ndarray:
    """Pixels with depth inside a window; with ``center_depth`` the window is centered on the hand."""
    depth = np.asarray(depth, dtype=np.float64)
    if center_depth is not None:
        min_depth = max(min_depth, center_depth - half_window)
        max_depth = min(max_depth, center_depth + half_window)
    return (depth > 0) & (depth >= min_depth) & (depth <= max_depth)


def obb_normalize(points: np.ndarray) -> PointFrame:
    """Rotate into the PCA-aligned OBB, center it and scale by its longest side.

    Axis signs: the first axis points along +x of the camera, the second
    along +y, the third completes a right-handed frame.
    """
    p = np.asarray(points, dtype=np.float64)
    if len(p) < 3:
        raise DegenerateFrameError(f"need at least 3 points, got {len(p)}")
    mean = p.mean(axis=0)
    cov = np.cov((p - mean).T, bias=True)
    w, V = eigh_sym3(cov)
    if w[0] <= 1e-12 or w[1] <= 1e-9 * w[0]:
        raise DegenerateFrameError("point covariance is rank deficient (collinear or repeated points)")
    a0 = V[:, 0] * (1.0 if V[0, 0] >= 0 else -1.0)
    a1 = V[:, 1] * (1.0 if V[1, 1] >= 0 else -1.0)
    R = np.stack([a0, a1, np.cross(a0, a1)], axis=1)
    rotated = (p - mean) @ R
    lo, hi = rotated.min(axis=0), rotated.max(axis=0)
    scale = float((hi - lo).max())
    center = mean + R @ ((lo + hi) / 2)
    tf = NormalizationTransform(R, center, scale)
    out = tf.normalize(p)
    np.clip(out, -0.5, 0.5, out=out)  # rounding only
    return PointFrame(out, None, tf)


def subsample(points: np.ndarray, n: int = 1024, seed: int | np.random.Generator | None = 0) -> np.ndarray:
    """Pick ``n`` rows: without replacement if enough, else all rows plus random repeats."""
    p = np.asarray(points)
    m = len(p)
    if m == 0:
        raise EmptyFrameError("cannot subsample an empty point set")
    rng = np.random.default_rng(seed)
    if m >= n:
        idx = rng.choice(m, n, replace=False)
    else:
        idx = rng.permutation(np.concatenate([np.arange(m), rng.integers(0, m, n - m)]))
    return p[idx]


def surface_normals(points: np.ndarray, k: int = 30, view_dir=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Plane-fit normals over the k nearest neighbours (self included).

    Each normal is flipped to have a non-negative component along ``view_dir``.
    """
    p = np.asarray(points, dtype=np.float64)
    if len(p) <= k:
        raise ValueError(f"need more than k={k} points, got {len(p)}")
    _, nbr = cKDTree(p).query(p, k=k)
    local = p[nbr]
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / k
    _, V = eigh_sym3(cov)
    normals = V[:, :, 2]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    flip = normals @ np.asarray(view_dir, dtype=np.float64) < 0
    normals[flip] *= -1
    return normals


def denormalize_joints(joints: np.ndarray, transform: NormalizationTransform) -> np.ndarray:
    return transform.denormalize(joints)


def preprocess_points(points_mm: np.ndarray, n_points: int = 1024, k: int = 30,
                      seed: int | np.random.Generator | None = 0, joints_mm: np.ndarray | None = None) -> PointFrame:
    """Camera-space cloud -> PointFrame (OBB normalize, subsample, normals)."""
    frame = obb_normalize(points_mm)
    pts = subsample(frame.points, n_points, seed)
    view = frame.transform.camera_position()
    normals = surface_normals(pts, k, view / np.linalg.norm(view))
    gt = None if joints_mm is None else frame.transform.normalize(joints_mm)
    return PointFrame(pts, normals, frame.transform, gt)


def preprocess_depth(depth: np.ndarray, intrinsics: CameraIntrinsics, mask: np.ndarray | None = None,
                     n_points: int = 1024, k: int = 30, seed: int | np.random.Generator | None = 0,
                     joints_mm: np.ndarray | None = None) -> PointFrame:
    return preprocess_points(depth_to_points(depth, intrinsics, mask), n_points, k, seed, joints_mm)
