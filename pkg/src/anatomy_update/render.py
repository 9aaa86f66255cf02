"""Z-depth rendering of triangle meshes and TSDF volumes.

Depth is the camera-frame z of the first surface along each pixel ray, not the
ray length, so that ``depth - z_c`` is the signed distance used in fusion.
"""
from __future__ import annotations

import numpy as np

from .geom import CameraIntrinsics, DepthMap, RigidTransform, TriangleMesh, pixel_rays
from .tsdf import TsdfVolume

NEAR_PLANE = 1e-3  # mm
_MAX_PAIRS = 2_000_000


def render_depth_mesh(mesh: TriangleMesh, T: RigidTransform, K: CameraIntrinsics) -> DepthMap:
    """Nearest hit per pixel center; front and back faces both count.

    Each triangle is rasterized over the pixel centers inside its projection
    with an inclusive edge test (so shared edges leave no cracks) and depth is
    interpolated as ``1/z`` in screen space, which is exact for planar faces.
    Triangles with a vertex behind the near plane are skipped.
    """
    H, W = K.height, K.width
    zbuf = np.full(H * W, np.inf)
    if mesh.is_empty:
        return DepthMap(np.zeros((H, W), np.float32))

    Xc = T.apply(mesh.vertices)
    tri = mesh.triangles
    z = Xc[:, 2][tri]
    keep = np.all(z > NEAR_PLANE, axis=1)
    tri, z = tri[keep], z[keep]
    u = (K.fx * Xc[:, 0] / np.where(Xc[:, 2] > NEAR_PLANE, Xc[:, 2], 1.0) + K.cx)[tri]
    v = (K.fy * Xc[:, 1] / np.where(Xc[:, 2] > NEAR_PLANE, Xc[:, 2], 1.0) + K.cy)[tri]

    u0 = np.maximum(np.ceil(u.min(1) - 1e-9), 0).astype(np.int64)
    u1 = np.minimum(np.floor(u.max(1) + 1e-9), W - 1).astype(np.int64)
    v0 = np.maximum(np.ceil(v.min(1) - 1e-9), 0).astype(np.int64)
    v1 = np.minimum(np.floor(v.max(1) + 1e-9), H - 1).astype(np.int64)
    nu = np.maximum(u1 - u0 + 1, 0)
    nv = np.maximum(v1 - v0 + 1, 0)
    area = (u[:, 1] - u[:, 0]) * (v[:, 2] - v[:, 0]) - (u[:, 2] - u[:, 0]) * (v[:, 1] - v[:, 0])
    live = np.flatnonzero((nu > 0) & (nv > 0) & (np.abs(area) > 1e-12))
    if live.size == 0:
        return DepthMap(np.zeros((H, W), np.float32))

    group = np.cumsum(nu[live] * nv[live]) // _MAX_PAIRS
    for g in np.unique(group):
        _raster_chunk(live[group == g], u, v, z, area, u0, v0, nu, nv, W, zbuf)

    zbuf[~np.isfinite(zbuf)] = 0.0
    return DepthMap(zbuf.reshape(H, W).astype(np.float32))


def _raster_chunk(ids, u, v, z, area, u0, v0, nu, nv, W, zbuf):
    counts = nu[ids] * nv[ids]
    t = np.repeat(ids, counts)
    k = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    pu = u0[t] + k % nu[t]
    pv = v0[t] + k // nu[t]
    uu, vv, zz = u[t], v[t], z[t]
    # Screen-space barycentrics, normalized by the signed area.
    l0 = ((uu[:, 1] - pu) * (vv[:, 2] - pv) - (uu[:, 2] - pu) * (vv[:, 1] - pv)) / area[t]
    l1 = ((uu[:, 2] - pu) * (vv[:, 0] - pv) - (uu[:, 0] - pu) * (vv[:, 2] - pv)) / area[t]
    l2 = 1.0 - l0 - l1
    eps = -1e-9
    inside = (l0 >= eps) & (l1 >= eps) & (l2 >= eps)
    inv_z = l0 / zz[:, 0] + l1 / zz[:, 1] + l2 / zz[:, 2]
    inside &= inv_z > 0
    np.minimum.at(zbuf, (pv * W + pu)[inside], 1.0 / inv_z[inside])


def _trilinear(V: TsdfVolume, g: np.ndarray, min_weight: float):
    """Trilinear D at grid coordinates ``g`` (N, 3) and whether all corners are observed."""
    dims = np.asarray(V.dims)
    i0 = np.floor(g).astype(np.int64)
    inside = np.all((i0 >= 0) & (i0 < dims - 1), axis=1)
    i0 = np.clip(i0, 0, dims - 2)
    f = g - i0
    val = np.zeros(len(g))
    ok = inside.copy()
    for ox in (0, 1):
        for oy in (0, 1):
            for oz in (0, 1):
                ix, iy, iz = i0[:, 0] + ox, i0[:, 1] + oy, i0[:, 2] + oz
                wgt = ((f[:, 0] if ox else 1 - f[:, 0]) * (f[:, 1] if oy else 1 - f[:, 1])
                       * (f[:, 2] if oz else 1 - f[:, 2]))
                val += wgt * V.D[ix, iy, iz]
                ok &= V.W[ix, iy, iz] >= min_weight
    return val, ok


def render_depth_volume(V: TsdfVolume, T: RigidTransform, K: CameraIntrinsics,
                        min_weight: float = 1.0, step_voxels: float = 0.5) -> DepthMap:
    """Raycast the first observed front-to-back zero crossing of the TSDF."""
    rays_c = pixel_rays(K).reshape(-1, 3)
    dirs = rays_c @ T.rotation  # world direction per unit camera z
    eye = T.camera_center()
    lo = V.origin
    hi = V.origin + V.extent
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - eye) / dirs
        tb = (hi - eye) / dirs
    t_near = np.nanmax(np.minimum(ta, tb), axis=1)
    t_far = np.nanmin(np.maximum(ta, tb), axis=1)
    t_near = np.maximum(t_near, NEAR_PLANE)

    depth = np.zeros(len(dirs))
    hit = t_far > t_near
    dt = step_voxels * V.voxel_size / np.linalg.norm(dirs, axis=1)
    rays = np.flatnonzero(hit)
    t_prev = t_near[rays]
    g = V.world_to_grid(eye + t_prev[:, None] * dirs[rays])
    d_prev, ok_prev = _trilinear(V, g, min_weight)
    while rays.size:
        t_cur = t_prev + dt[rays]
        g = V.world_to_grid(eye + t_cur[:, None] * dirs[rays])
        d_cur, ok_cur = _trilinear(V, g, min_weight)
        cross = ok_prev & ok_cur & (d_prev >= 0) & (d_cur < 0)
        if np.any(cross):
            frac = d_prev[cross] / (d_prev[cross] - d_cur[cross])
            depth[rays[cross]] = t_prev[cross] + frac * dt[rays[cross]]
        alive = ~cross & (t_cur < t_far[rays])
        rays, t_prev, d_prev, ok_prev = rays[alive], t_cur[alive], d_cur[alive], ok_cur[alive]
    return DepthMap(depth.reshape(K.shape).astype(np.float32))
