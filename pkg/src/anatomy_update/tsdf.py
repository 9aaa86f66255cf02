"""Dense TSDF voxel grid: weighted-average fusion and zero-level extraction.

Arrays ``D`` and ``W`` are float32 with shape ``dims`` indexed ``[x, y, z]``.
``D`` stores the signed distance divided by the truncation distance, positive
in front of the surface (free space). Unobserved voxels hold ``D = 1, W = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _mc_tables
from .geom import (CameraIntrinsics, DepthMap, RigidTransform, TriangleMesh,
                   check_dims, pixel_index, project_points)


@dataclass(eq=False)
class TsdfVolume:
    dims: tuple[int, int, int]
    origin: np.ndarray
    voxel_size: float
    truncation: float
    D: np.ndarray = field(repr=False)
    W: np.ndarray = field(repr=False)
    weight_cap: float = 255.0

    def __post_init__(self):
        # integration writes through flat views, which only alias C-ordered storage
        self.D = np.ascontiguousarray(self.D, dtype=np.float32)
        self.W = np.ascontiguousarray(self.W, dtype=np.float32)
        if self.D.shape != tuple(self.dims) or self.W.shape != tuple(self.dims):
            raise ValueError("D and W must match dims")

    @property
    def extent(self) -> np.ndarray:
        """World size (mm) spanned by voxel centers."""
        return (np.asarray(self.dims) - 1) * self.voxel_size

    @cached_property
    def centers(self) -> np.ndarray:
        """World coordinates of all voxel centers, flattened in C order, shape (N, 3)."""
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + idx * self.voxel_size

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(tuple(self.dims), self.origin.copy(), self.voxel_size, self.truncation,
                          self.D.copy(), self.W.copy(), self.weight_cap)

    def world_to_grid(self, X) -> np.ndarray:
        return (np.asarray(X, float) - self.origin) / self.voxel_size


def new_volume(dims, origin, voxel_size: float, truncation: float,
               weight_cap: float = 255.0) -> TsdfVolume:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise ValueError("dims must be three integers >= 2")
    if not voxel_size > 0 or not truncation > 0:
        raise ValueError("voxel_size and truncation must be positive")
    if not weight_cap > 0:
        raise ValueError("weight_cap must be positive")
    origin = np.asarray(origin, dtype=float).reshape(3)
    return TsdfVolume(dims, origin, float(voxel_size), float(truncation),
                      np.ones(dims, np.float32), np.zeros(dims, np.float32), float(weight_cap))


def volume_from_sdf(sdf, dims, origin, voxel_size: float, truncation: float,
                    weight: float = 1.0) -> TsdfVolume:
    """Fill a volume directly from an analytic signed-distance callable (mm, positive outside)."""
    V = new_volume(dims, origin, voxel_size, truncation)
    d = np.clip(sdf(V.centers) / truncation, -1.0, 1.0)
    V.D[...] = d.reshape(V.dims)
    V.W[...] = weight
    return V


def integrate_frame(V: TsdfVolume, M: DepthMap, T: RigidTransform, K: CameraIntrinsics,
                    w=None, touched: np.ndarray | None = None,
                    reset_untouched: bool = False) -> int:
    """Fuse one depth map into ``V`` in place; returns the number of voxels updated.

    ``w`` is a per-pixel weight image (defaults to all ones). ``touched`` is a
    flat bool array with one entry per voxel; updated voxels are marked in it.
    With ``reset_untouched`` a voxel's prior weight is zeroed on its first
    update, i.e. when it is not yet marked.
    """
    check_dims(M, K)
    if w is None:
        w = np.ones(K.shape, np.float32)
    w = np.asarray(getattr(w, "values", w), dtype=np.float32)
    check_dims(w, K)

    uv, z = project_points(T, K, V.centers)
    iu, iv, ok = pixel_index(uv, z, K)
    flat = iv * K.width + iu
    depth = M.values.reshape(-1)[flat].astype(float)
    weight = w.reshape(-1)[flat].astype(float)
    ok &= (depth > 0) & (weight > 0)
    sdf = (depth - z) / V.truncation
    ok &= sdf >= -1.0
    sel = np.flatnonzero(ok)
    if sel.size == 0:
        return 0

    d = np.minimum(1.0, sdf[sel])
    wi = weight[sel]
    Dflat = V.D.reshape(-1)
    Wflat = V.W.reshape(-1)
    Wold = Wflat[sel].astype(float)
    if touched is not None:
        if reset_untouched:
            Wold[~touched[sel]] = 0.0
        touched[sel] = True
    Dold = Dflat[sel].astype(float)
    Wsum = Wold + wi
    Dflat[sel] = ((Wold * Dold + wi * d) / Wsum).astype(np.float32)
    Wflat[sel] = np.minimum(Wsum, V.weight_cap).astype(np.float32)
    return int(sel.size)


def integrate_sequence(V: TsdfVolume, frames, K: CameraIntrinsics) -> None:
    """Fold :func:`integrate_frame` over ``(depth, pose, weight)`` triples."""
    for M, T, w in frames:
        integrate_frame(V, M, T, K, w)


_TRI = np.full((256, 15), -1, np.int64)
_NTRI = np.zeros(256, np.int64)
for _case, _edges in enumerate(_mc_tables.TRIANGLES):
    _TRI[_case, :len(_edges)] = _edges
    _NTRI[_case] = len(_edges) // 3
_CORNERS = np.array(_mc_tables.CORNER_OFFSETS, np.int64)
_EDGES = np.array(_mc_tables.EDGE_CORNERS, np.int64)
# Per edge: lower corner offset and axis of the grid edge it lies on.
_EDGE_START = np.minimum(_CORNERS[_EDGES[:, 0]], _CORNERS[_EDGES[:, 1]])
_EDGE_AXIS = np.argmax(np.abs(_CORNERS[_EDGES[:, 1]] - _CORNERS[_EDGES[:, 0]]), axis=1)


def marching_cubes(field: np.ndarray, cell_mask: np.ndarray | None = None,
                   level: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Iso-surface of a 3-D scalar array in index coordinates.

    ``cell_mask`` has shape ``field.shape - 1``; only cells marked True are
    polygonized. Degenerate (zero-area) triangles are dropped.
    """
    f = np.asarray(field, dtype=float) - level
    nx, ny, nz = f.shape
    below = f < 0
    case = np.zeros((nx - 1, ny - 1, nz - 1), np.int64)
    for c, (ox, oy, oz) in enumerate(_CORNERS):
        case |= below[ox:nx - 1 + ox, oy:ny - 1 + oy, oz:nz - 1 + oz].astype(np.int64) << c
    active = (case != 0) & (case != 255)
    if cell_mask is not None:
        active &= cell_mask
    cells = np.argwhere(active)
    if len(cells) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), np.int64)
    cases = case[active]

    counts = _NTRI[cases]
    cell_of_tri = np.repeat(np.arange(len(cells)), counts)
    tri_in_cell = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    cols = 3 * tri_in_cell[:, None] + np.arange(3)
    edges = _TRI[cases[cell_of_tri][:, None], cols]  # (T, 3) local edge ids

    start = cells[cell_of_tri][:, None, :] + _EDGE_START[edges]  # (T, 3, 3)
    axis = _EDGE_AXIS[edges]
    gid = axis * (nx * ny * nz) + (start[..., 0] * ny + start[..., 1]) * nz + start[..., 2]
    uniq, inverse = np.unique(gid.reshape(-1), return_inverse=True)
    tris = inverse.reshape(-1, 3)

    ax = uniq // (nx * ny * nz)
    rem = uniq % (nx * ny * nz)
    p0 = np.stack([rem // (ny * nz), (rem // nz) % ny, rem % nz], axis=1)
    p1 = p0 + np.eye(3, dtype=np.int64)[ax]
    f0 = f[p0[:, 0], p0[:, 1], p0[:, 2]]
    f1 = f[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = f0 / (f0 - f1)
    verts = p0 + t[:, None] * (p1 - p0)

    a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    tris = tris[area2 > 1e-12]
    used, remap = np.unique(tris.reshape(-1), return_inverse=True)
    return verts[used], remap.reshape(-1, 3)


def extract_mesh(V: TsdfVolume, min_weight: float = 1.0) -> TriangleMesh:
    """Zero level set of ``D`` over cells whose eight corners have ``W >= min_weight``."""
    seen = V.W >= min_weight
    nx, ny, nz = V.dims
    cell_ok = np.ones((nx - 1, ny - 1, nz - 1), bool)
    for ox, oy, oz in _CORNERS:
        cell_ok &= seen[ox:nx - 1 + ox, oy:ny - 1 + oy, oz:nz - 1 + oz]
    verts, tris = marching_cubes(V.D, cell_ok)
    return TriangleMesh(V.origin + verts * V.voxel_size, tris)
