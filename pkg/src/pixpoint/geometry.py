"""Calibrated LiDAR-to-camera projection and pixel-point correspondence matching.

Conventions: camera frame is +z forward / +x right / +y down; a point p in the
LiDAR frame maps to q = R p + t. Projection uses u = fx*qx/qz + cx and pixels
are quantized by floor, so a ray through pixel center (c+0.5, r+0.5) projects
into pixel (r, c). Visibility is in-frustum with qz > Z_MIN plus per-pixel
nearest-depth deduplication; there is no z-buffer occlusion test.

All functions are pure and hold no state.
"""

from dataclasses import dataclass, field

import numpy as np

# Minimum camera-frame depth for a point to count as in front of the camera.
Z_MIN = 1e-3

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion q = R p + t, validated to orthonormality 1e-9."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)
        if rot.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(tra)):
            raise ValueError("transform entries must be finite")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant must be 1 within 1e-9")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rot_inv = self.rotation.T
        return RigidTransform(rot_inv, -rot_inv @ self.translation)


@dataclass(frozen=True)
class SensorRig:
    intrinsics: CameraIntrinsics
    lidar_to_camera: RigidTransform

    def camera_center(self) -> np.ndarray:
        """Camera optical center expressed in the LiDAR frame."""
        return self.lidar_to_camera.inverse().translation


@dataclass
class CorrespondenceSet:
    """M matched (pixel, point) pairs, sorted ascending by (row, col)."""

    pixel_rows: np.ndarray
    pixel_cols: np.ndarray
    point_indices: np.ndarray
    count: int = field(init=False)

    def __post_init__(self):
        self.pixel_rows = np.asarray(self.pixel_rows, dtype=np.int64)
        self.pixel_cols = np.asarray(self.pixel_cols, dtype=np.int64)
        self.point_indices = np.asarray(self.point_indices, dtype=np.int64)
        if not (len(self.pixel_rows) == len(self.pixel_cols) == len(self.point_indices)):
            raise ValueError("index lists must share one length")
        self.count = len(self.pixel_rows)


def project_points(points: np.ndarray, rig: SensorRig):
    """Project LiDAR-frame points through the rig.

    Returns (coords, depth, visible): coords is N x 2 continuous pixel
    (u, v) with NaN where the point is behind the camera, depth is the
    camera-frame z for every point, and visible marks points whose floored
    pixel lies inside the image with depth > Z_MIN.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        points = points.reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise ValueError("point coordinates must be finite")

    intr = rig.intrinsics
    q = rig.lidar_to_camera.apply(points)
    depth = q[:, 2]
    in_front = depth > Z_MIN

    coords = np.full((len(points), 2), np.nan, dtype=np.float64)
    safe_z = np.where(in_front, depth, 1.0)
    u = intr.fx * q[:, 0] / safe_z + intr.cx
    v = intr.fy * q[:, 1] / safe_z + intr.cy
    coords[in_front, 0] = u[in_front]
    coords[in_front, 1] = v[in_front]

    col = np.floor(u).astype(np.int64)
    row = np.floor(v).astype(np.int64)
    visible = (
        in_front
        & (col >= 0)
        & (col < intr.width)
        & (row >= 0)
        & (row < intr.height)
    )
    return coords, depth, visible


def back_project(coords: np.ndarray, depth: np.ndarray, rig: SensorRig) -> np.ndarray:
    """Invert project_points for visible points (used by round-trip checks)."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    intr = rig.intrinsics
    x = (coords[:, 0] - intr.cx) / intr.fx * depth
    y = (coords[:, 1] - intr.cy) / intr.fy * depth
    cam = np.stack([x, y, depth], axis=1)
    return rig.lidar_to_camera.inverse().apply(cam)


def match_correspondences(points: np.ndarray, rig: SensorRig) -> CorrespondenceSet:
    """Visible points deduplicated per pixel by smallest camera depth.

    Ties on depth keep the lowest point index; output is sorted by (row, col).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        empty = np.empty(0, dtype=np.int64)
        return CorrespondenceSet(empty, empty, empty)

    coords, depth, visible = project_points(points, rig)
    idx = np.nonzero(visible)[0]
    if len(idx) == 0:
        empty = np.empty(0, dtype=np.int64)
        return CorrespondenceSet(empty, empty, empty)

    rows = np.floor(coords[idx, 1]).astype(np.int64)
    cols = np.floor(coords[idx, 0]).astype(np.int64)
    # Sort by (row, col, depth, point index); first hit per pixel wins.
    order = np.lexsort((idx, depth[idx], cols, rows))
    rows, cols, idx = rows[order], cols[order], idx[order]
    pixel_key = rows * rig.intrinsics.width + cols
    first = np.ones(len(pixel_key), dtype=bool)
    first[1:] = pixel_key[1:] != pixel_key[:-1]
    return CorrespondenceSet(rows[first], cols[first], idx[first])


def gather_matched_features(feature_map, point_features, corr: CorrespondenceSet):
    """Pair pixel features with point features along a correspondence set.

    feature_map is H x W x D, point_features is N x D; both may be numpy
    arrays or torch tensors (gradients flow through the gather). Returns
    (G, F), each M x D in correspondence order.
    """
    h, w, d_map = feature_map.shape
    n, d_pts = point_features.shape
    if d_map != d_pts:
        raise ValueError(f"feature widths differ: map {d_map} vs points {d_pts}")
    if corr.count:
        if corr.pixel_rows.max() >= h or corr.pixel_cols.max() >= w:
            raise ValueError("correspondence pixel out of feature-map bounds")
        if corr.pixel_rows.min() < 0 or corr.pixel_cols.min() < 0:
            raise ValueError("negative correspondence pixel index")
        if corr.point_indices.max() >= n or corr.point_indices.min() < 0:
            raise ValueError("correspondence point index out of bounds")
    g = feature_map[corr.pixel_rows, corr.pixel_cols]
    f = point_features[corr.point_indices]
    return g, f
