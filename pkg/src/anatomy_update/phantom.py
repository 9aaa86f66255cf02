"""Analytic cavity phantom with sequential carved bites.

The scene is a signed distance field in mm, positive in free space: a
cylindrical corridor along +z closed by an end wall at ``z = wall_z``, with a
few solid bumps so that rigid registration is well constrained. Bites are
spheres subtracted from the solid.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .geom import CameraIntrinsics, DepthMap, RigidTransform, TriangleMesh, look_at, pixel_rays
from .tsdf import marching_cubes

Sphere = tuple[tuple[float, float, float], float]

DEFAULT_BUMPS: tuple[Sphere, ...] = (
    ((0.0, 6.0, 0.0), 2.0),       # on the end wall, above the bite row
    ((-9.0, 3.0, -7.0), 2.5),     # side walls
    ((7.0, -7.0, -12.0), 3.0),
    ((9.5, 2.0, -16.0), 2.5),
)

DEFAULT_BITES: tuple[Sphere, ...] = tuple(
    ((x, y, 0.4 * r), r) for x, y, r in
    [(-5.0, -1.0, 2.0), (-2.5, 0.5, 2.5), (0.0, -0.5, 3.0), (2.5, 1.0, 2.5), (5.0, -1.0, 2.0)]
)

DEFAULT_INTRINSICS = CameraIntrinsics(fx=120.0, fy=120.0, cx=79.5, cy=59.5, width=160, height=120)


def _as_spheres(items) -> tuple[Sphere, ...]:
    return tuple((tuple(float(c) for c in center), float(r)) for center, r in items)


@dataclass(frozen=True)
class PhantomScene:
    corridor_radius: float = 10.0
    wall_z: float = 0.0
    corridor_length: float = 40.0
    bumps: tuple[Sphere, ...] = DEFAULT_BUMPS
    bites: tuple[Sphere, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "bumps", _as_spheres(self.bumps))
        object.__setattr__(self, "bites", _as_spheres(self.bites))

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box outside of which rays are treated as misses."""
        r = self.corridor_radius + 6.0
        return (np.array([-r, -r, self.wall_z - self.corridor_length]),
                np.array([r, r, self.wall_z + 10.0]))

    def base_sdf(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        qx = np.hypot(X[:, 0], X[:, 1]) - self.corridor_radius
        qz = X[:, 2] - self.wall_z
        solid = np.minimum(np.maximum(qx, qz), 0) + np.hypot(np.maximum(qx, 0), np.maximum(qz, 0))
        free = -solid
        for c, r in self.bumps:
            free = np.minimum(free, np.linalg.norm(X - c, axis=1) - r)
        return free

    def sdf(self, X) -> np.ndarray:
        free = self.base_sdf(X)
        X = np.atleast_2d(np.asarray(X, float))
        for c, r in self.bites:
            free = np.maximum(free, r - np.linalg.norm(X - c, axis=1))
        return free

    def upto(self, n_bites: int) -> "PhantomScene":
        return replace(self, bites=self.bites[:n_bites])


def carve_bite(scene: PhantomScene, center, radius: float) -> PhantomScene:
    center = tuple(float(c) for c in center)
    if not radius > 0:
        raise ValueError("bite radius must be positive")
    s = float(scene.sdf(center)[0])
    if abs(s) >= radius:
        raise ValueError(f"bite center is {abs(s):.3f} mm from the surface, beyond its radius {radius}")
    return replace(scene, bites=scene.bites + ((center, float(radius)),))


def default_scene(n_bites: int = 5) -> PhantomScene:
    scene = PhantomScene()
    for c, r in DEFAULT_BITES[:n_bites]:
        scene = carve_bite(scene, c, r)
    return scene


def bite_target(scene: PhantomScene) -> tuple[np.ndarray, float]:
    """Center and radius of a region covering the default bite row."""
    return np.array([0.0, 0.0, scene.wall_z]), 6.0


def gen_trajectory(scene: PhantomScene, n_frames: int, target, phase: float = 0.0,
                   distance=(18.0, 11.0), sway: float = 3.5, margin: float = 1.0) -> list[RigidTransform]:
    """Smooth approach toward ``target`` with lateral sway, looking at it from every pose."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    target = np.asarray(target, float)
    s = np.linspace(0.0, 1.0, n_frames) if n_frames > 1 else np.array([0.5])
    poses = []
    for si in s:
        ang = phase + 2.0 * np.pi * si
        dist = distance[0] + (distance[1] - distance[0]) * si
        eye = target + np.array([sway * np.cos(ang), 0.8 * sway * np.sin(ang), -dist])
        if scene.sdf(eye)[0] <= margin:
            raise ValueError(f"camera at {eye} is within {margin} mm of tissue")
        roll = 0.15 * np.sin(ang + 0.7)
        up = np.array([np.sin(roll), -np.cos(roll), 0.0])
        poses.append(look_at(eye, target, up))
    return poses


def unchanged_poses(scene: PhantomScene) -> list[RigidTransform]:
    """Poses viewing side-wall anatomy far from the end wall."""
    z0 = scene.wall_z
    views = [((-2.0, 0.0, z0 - 26.0), (9.0, -1.0, z0 - 14.0)),
             ((2.0, 1.0, z0 - 27.0), (-8.0, 3.0, z0 - 9.0)),
             ((0.0, 2.0, z0 - 28.0), (6.0, -7.0, z0 - 12.0))]
    return [look_at(e, t) for e, t in views]


def _ray_dirs(T: RigidTransform, K: CameraIntrinsics) -> np.ndarray:
    return pixel_rays(K).reshape(-1, 3) @ T.rotation


@numba.njit(cache=True)
def _scene_sdf_point(x, y, z, radius, wall_z, bumps, bites):
    qx = np.sqrt(x * x + y * y) - radius
    qz = z - wall_z
    solid = min(max(qx, qz), 0.0) + np.sqrt(max(qx, 0.0) ** 2 + max(qz, 0.0) ** 2)
    free = -solid
    for k in range(bumps.shape[0]):
        dx, dy, dz = x - bumps[k, 0], y - bumps[k, 1], z - bumps[k, 2]
        free = min(free, np.sqrt(dx * dx + dy * dy + dz * dz) - bumps[k, 3])
    for k in range(bites.shape[0]):
        dx, dy, dz = x - bites[k, 0], y - bites[k, 1], z - bites[k, 2]
        free = max(free, bites[k, 3] - np.sqrt(dx * dx + dy * dy + dz * dz))
    return free


@numba.njit(cache=True)
def _trace(eye, dirs, t_exit, radius, wall_z, bumps, bites, tol, min_step, max_iter):
    n = dirs.shape[0]
    depth = np.zeros(n)
    for i in range(n):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        norm = np.sqrt(dx * dx + dy * dy + dz * dz)
        t = 1e-3
        t_prev = t
        for _ in range(max_iter):
            if t >= t_exit[i]:
                break
            s = _scene_sdf_point(eye[0] + t * dx, eye[1] + t * dy, eye[2] + t * dz,
                                 radius, wall_z, bumps, bites)
            if abs(s) < tol:
                depth[i] = t
                break
            if s < 0.0:
                a, b = t_prev, t
                for _ in range(60):
                    mid = 0.5 * (a + b)
                    sm = _scene_sdf_point(eye[0] + mid * dx, eye[1] + mid * dy, eye[2] + mid * dz,
                                          radius, wall_z, bumps, bites)
                    if abs(sm) < tol * 0.1:
                        a = b = mid
                        break
                    if sm > 0.0:
                        a = mid
                    else:
                        b = mid
                depth[i] = 0.5 * (a + b)
                break
            t_prev = t
            t += max(s, min_step) / norm
    return depth


def _sphere_array(spheres) -> np.ndarray:
    return np.array([[*c, r] for c, r in spheres], float).reshape(-1, 4)


def render_gt_depth(scene: PhantomScene, T: RigidTransform, K: CameraIntrinsics,
                    tol: float = 1e-4, min_step: float = 0.01, max_iter: int = 5000) -> DepthMap:
    """Sphere-traced z-depth against the analytic SDF.

    Steps never fall below ``min_step`` so grazing rays make progress; a step
    that lands inside tissue is refined by bisection.
    """
    dirs = _ray_dirs(T, K)
    eye = T.camera_center()
    lo, hi = scene.bounds
    with np.errstate(divide="ignore", invalid="ignore"):
        ta, tb = (lo - eye) / dirs, (hi - eye) / dirs
    t_exit = np.nanmin(np.maximum(ta, tb), axis=1)
    depth = _trace(eye, dirs, t_exit, scene.corridor_radius, scene.wall_z,
                   _sphere_array(scene.bumps), _sphere_array(scene.bites), tol, min_step, max_iter)
    return DepthMap(depth.reshape(K.shape).astype(np.float32))


def hit_points(scene: PhantomScene, T: RigidTransform, K: CameraIntrinsics, M: DepthMap | None = None):
    """World hit point per pixel (H*W, 3) and validity for a ground-truth render."""
    M = render_gt_depth(scene, T, K) if M is None else M
    z = M.values.reshape(-1).astype(float)
    pts = T.camera_center() + z[:, None] * _ray_dirs(T, K)
    return pts, z > 0


@dataclass(frozen=True)
class NoiseModel:
    scale_range: tuple[float, float] = (0.7, 1.3)
    sigma: float = 0.3
    bias_amplitude: float = 0.5
    bias_period: float = 60.0  # pixels
    pose_jitter_deg: float = 2.0
    pose_jitter_mm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError("scale range must be positive and ordered")
        if self.sigma < 0 or self.bias_amplitude < 0:
            raise ValueError("noise magnitudes must be non-negative")


def _frame_rng(noise: NoiseModel, frame_seed: int) -> np.random.Generator:
    return np.random.default_rng([noise.seed, frame_seed])


def frame_scale(noise: NoiseModel, frame_seed: int = 0) -> float:
    """The global scale that :func:`corrupt_depth` applies for ``frame_seed``."""
    return float(_frame_rng(noise, frame_seed).uniform(*noise.scale_range))


def corrupt_depth(M: DepthMap, noise: NoiseModel, frame_seed: int = 0) -> DepthMap:
    """``s * (M + bias + gaussian)`` on valid pixels, one scale draw per frame."""
    rng = _frame_rng(noise, frame_seed)
    s = rng.uniform(*noise.scale_range)
    theta, phi = rng.uniform(0, 2 * np.pi, size=2)
    gauss = rng.standard_normal(M.shape)
    lo, hi = noise.scale_range
    valid = M.valid
    if noise.sigma == 0 and noise.bias_amplitude == 0 and lo == hi == 1.0:
        return DepthMap(M.values.copy())
    v, u = np.mgrid[0:M.height, 0:M.width]
    bias = noise.bias_amplitude * np.sin(
        2 * np.pi * (u * np.cos(theta) + v * np.sin(theta)) / noise.bias_period + phi)
    out = s * (M.values.astype(float) + bias + noise.sigma * gauss)
    out = np.where(valid & (out > 0), out, 0.0)
    return DepthMap(out.astype(np.float32))


def pose_jitter(noise: NoiseModel, frame_seed: int = 0) -> RigidTransform:
    """Camera-frame perturbation emulating tracking / hand-eye error."""
    rng = np.random.default_rng([noise.seed, frame_seed, 1])
    axis = rng.standard_normal(3)
    angle = np.radians(noise.pose_jitter_deg) * rng.uniform(0.5, 1.0)
    # lateral only: an offset along the optical axis is confounded with the
    # per-frame scale, which the scale solve (not ICP) is meant to absorb
    direction = np.array([*rng.standard_normal(2), 0.0])
    direction /= np.linalg.norm(direction)
    offset = noise.pose_jitter_mm * rng.uniform(0.5, 1.0) * direction
    return RigidTransform.from_axis_angle(axis, angle, offset)


def estimated_depth(scene: PhantomScene, T: RigidTransform, K: CameraIntrinsics,
                    noise: NoiseModel, frame_seed: int = 0) -> DepthMap:
    """Simulated monocular estimate: render at a jittered pose, then corrupt."""
    true_pose = pose_jitter(noise, frame_seed) @ T
    return corrupt_depth(render_gt_depth(scene, true_pose, K), noise, frame_seed)


def gt_mesh(scene: PhantomScene, voxel_size: float = 0.25, z_span=(-25.0, 6.0)) -> TriangleMesh:
    """Marching-cubes mesh of the analytic scene over the region around the end wall."""
    r = scene.corridor_radius + 1.0
    lo = np.array([-r, -r, scene.wall_z + z_span[0]])
    hi = np.array([r, r, scene.wall_z + z_span[1]])
    dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
    idx = np.indices(dims).reshape(3, -1).T
    field = scene.sdf(lo + idx * voxel_size).reshape(dims)
    verts, tris = marching_cubes(field)
    return TriangleMesh(lo + verts * voxel_size, tris)


def bite_footprint(scene_before: PhantomScene, scene_after: PhantomScene, T: RigidTransform,
                   K: CameraIntrinsics, eps: float = 1e-3) -> np.ndarray:
    """Pixels whose ray reaches space carved between the two scenes."""
    before = render_gt_depth(scene_before, T, K).values
    after = render_gt_depth(scene_after, T, K).values
    return (before > 0) & (after > before + eps)
