"""Pinhole camera, rigid transforms and depth/point conversions.

Poses are world-to-camera: ``X_c = R @ X + t``. Pixel centers sit at integer
coordinates, so pixel ``(u, v)`` covers ``[u - 0.5, u + 0.5)``; depth lookups
use nearest-neighbour sampling. Any depth ``<= 0`` is invalid.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("transform must be finite")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=float).reshape(4, 4)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        R = np.eye(3) + np.sin(angle_rad) * K + (1 - np.cos(angle_rad)) * K @ K
        return cls(R, translation)

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        """Composition: ``(a @ b)(X) == a(b(X))``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def rotation_angle_deg(self) -> float:
        R = self.rotation
        s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        c = (np.trace(R) - 1.0) / 2.0
        return float(np.degrees(np.arctan2(s, c)))  # stable near 0, unlike arccos

    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


@dataclass(frozen=True, eq=False)
class DepthMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError("depth map must be 2-D")
        if not np.all(np.isfinite(v)):
            raise ValueError("depth values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def invalid(cls, height: int, width: int) -> "DepthMap":
        return cls(np.zeros((height, width), np.float32))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    pixels: np.ndarray | None = None  # flat row-major source pixel index per point

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", p)
        if self.pixels is not None:
            object.__setattr__(self, "pixels", np.asarray(self.pixels, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def transformed(self, T: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(T.apply(self.vertices), self.triangles)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def project_points(T: RigidTransform, K: CameraIntrinsics, X) -> tuple[np.ndarray, np.ndarray]:
    """Continuous pixel coordinates (N, 2) and camera z (N,) with no view test."""
    Xc = T.apply(np.atleast_2d(X))
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Xc[:, 0] / z + K.cx
        v = K.fy * Xc[:, 1] / z + K.cy
    return np.stack([u, v], axis=1), z


def pixel_index(uv: np.ndarray, z: np.ndarray, K: CameraIntrinsics):
    """Nearest integer pixel per projection plus an in-view flag."""
    with np.errstate(invalid="ignore"):
        iu = np.floor(uv[:, 0] + 0.5)
        iv = np.floor(uv[:, 1] + 0.5)
        ok = (z > 0) & (iu >= 0) & (iu < K.width) & (iv >= 0) & (iv < K.height)
    iu = np.where(ok, iu, 0).astype(np.int64)
    iv = np.where(ok, iv, 0).astype(np.int64)
    return iu, iv, ok


def project_point(T: RigidTransform, K: CameraIntrinsics, X):
    """Project one world point; returns ``(pixel, z_c)`` or ``None`` when out of view."""
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("point must be finite")
    uv, z = project_points(T, K, X[None])
    _, _, ok = pixel_index(uv, z, K)
    if not ok[0]:
        return None
    return uv[0], float(z[0])


def pixel_rays(K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions with unit z for every pixel, shape (H, W, 3)."""
    v, u = np.mgrid[0:K.height, 0:K.width].astype(float)
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def backproject_pixel(T: RigidTransform, K: CameraIntrinsics, pixel, depth: float) -> np.ndarray:
    if not depth > 0:
        raise ValueError("depth must be positive")
    u, v = pixel
    Xc = np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])
    return T.inverse().apply(Xc)


def check_dims(M: DepthMap | np.ndarray, K: CameraIntrinsics) -> None:
    shape = M.shape
    if tuple(shape) != K.shape:
        raise ValueError(f"image of shape {tuple(shape)} does not match intrinsics {K.shape}")


def depth_to_camera_points(M: DepthMap, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    check_dims(M, K)
    flat = M.values.reshape(-1).astype(float)
    idx = np.flatnonzero(flat > 0)
    rays = pixel_rays(K).reshape(-1, 3)[idx]
    return rays * flat[idx, None], idx


def depth_to_pointcloud(M: DepthMap, T: RigidTransform, K: CameraIntrinsics) -> PointCloud:
    Xc, idx = depth_to_camera_points(M, K)
    return PointCloud(T.inverse().apply(Xc), idx)


def points_to_depth(points, T: RigidTransform, K: CameraIntrinsics) -> np.ndarray:
    """Z-buffer world points into a (H, W) depth array keeping the nearest depth."""
    uv, z = project_points(T, K, points)
    iu, iv, ok = pixel_index(uv, z, K)
    depth = np.full(K.height * K.width, np.inf)
    np.minimum.at(depth, (iv * K.width + iu)[ok], z[ok])
    depth[~np.isfinite(depth)] = 0.0
    return depth.reshape(K.shape)


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> RigidTransform:
    """World-to-camera pose placing the camera at ``eye`` with +z toward ``target``."""
    eye = np.asarray(eye, float)
    z = np.asarray(target, float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return RigidTransform(R, -R @ eye)
