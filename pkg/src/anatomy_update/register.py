"""Monocular scale recovery and outlier-robust rigid registration."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geom import DepthMap, PointCloud, RigidTransform


class RegistrationError(RuntimeError):
    pass


class DegenerateConfigurationError(RegistrationError):
    pass


class NoConsensusError(RegistrationError):
    pass


class InsufficientOverlapError(RegistrationError):
    pass


@dataclass(frozen=True)
class RegistrationParams:
    inlier_threshold: float = 1.0  # mm; twice the default voxel size
    min_points: int = 100
    min_inlier_fraction: float = 0.3
    ransac_iterations: int = 1000
    early_exit_fraction: float = 0.8
    confidence: float = 0.999  # adaptive stop once a better triple is this unlikely
    score_points: int = 1000  # subsample used to score hypotheses
    icp_iterations: int = 50
    icp_tolerance: float = 1e-4  # mm of RMSE improvement
    max_points: int = 2500  # subsample used by ICP
    seed: int = 0


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    scale: float
    inlier_rmse: float
    inlier_fraction: float


def estimate_scale(source: DepthMap, reference: DepthMap, min_overlap: int = 50) -> float:
    """Median of ``reference / source`` over pixels valid in both."""
    if source.shape != reference.shape:
        raise ValueError("depth maps differ in size")
    both = source.valid & reference.valid
    if both.sum() < min_overlap:
        raise InsufficientOverlapError(f"only {int(both.sum())} overlapping pixels, need {min_overlap}")
    ratio = reference.values[both].astype(float) / source.values[both].astype(float)
    return float(np.median(ratio))


def rigid_from_correspondences(P, Q) -> RigidTransform:
    """Least-squares ``R, t`` minimizing ``sum |R p + t - q|^2`` (Kabsch with reflection guard)."""
    P = np.asarray(P, float).reshape(-1, 3)
    Q = np.asarray(Q, float).reshape(-1, 3)
    if len(P) != len(Q):
        raise ValueError("point sets differ in length")
    if len(P) < 3:
        raise DegenerateConfigurationError("at least three correspondences are required")
    cp, cq = P.mean(0), Q.mean(0)
    A, B = P - cp, Q - cq
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateConfigurationError("correspondences are collinear or coincident")
    U, _, Vt = np.linalg.svd(A.T @ B)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, cq - R @ cp)


def _score(tree: cKDTree, pts: np.ndarray, thr: float):
    dist, idx = tree.query(pts, distance_upper_bound=thr)
    inl = np.isfinite(dist)
    rmse = float(np.sqrt(np.mean(dist[inl] ** 2))) if inl.any() else np.inf
    return inl, idx, rmse


def ransac_icp(source: PointCloud, target: PointCloud,
               params: RegistrationParams = RegistrationParams(),
               init: RigidTransform | None = None) -> RegistrationResult:
    """Align ``source`` onto ``target``.

    RANSAC proposes transforms from random triples of nearest-neighbour
    correspondences; hypothesis 0 is the initial guess. The best hypothesis
    (most inliers, then lower RMSE, then lower index) seeds point-to-point ICP,
    which ignores pairs farther apart than ``inlier_threshold``.
    """
    if len(source) < params.min_points or len(target) < params.min_points:
        raise RegistrationError(f"need at least {params.min_points} points per cloud")
    rng = np.random.default_rng(params.seed)
    thr = params.inlier_threshold
    src = source.points
    if len(src) > params.max_points:
        src = src[np.sort(rng.choice(len(src), params.max_points, replace=False))]
    tgt = target.points
    tree = cKDTree(tgt)
    T0 = RigidTransform.identity() if init is None else init

    probe = src[:: max(1, len(src) // params.score_points)]
    _, nn = tree.query(T0.apply(probe))
    best_T, best_inl, _, best_rmse = T0, *_score(tree, T0.apply(probe), thr)
    budget = params.ransac_iterations
    it = 1
    while it < budget:
        w = best_inl.mean()
        if w > params.early_exit_fraction:
            break
        if w > 0:
            need = np.log(1 - params.confidence) / np.log(max(1 - w ** 3, 1e-12))
            budget = min(budget, int(np.ceil(need)) + 1)
        pick = rng.choice(len(probe), 3, replace=False)
        it += 1
        try:
            H = rigid_from_correspondences(probe[pick], tgt[nn[pick]])
        except DegenerateConfigurationError:
            continue
        inl, _, rmse = _score(tree, H.apply(probe), thr)
        if (-inl.sum(), rmse) < (-best_inl.sum(), best_rmse):
            best_T, best_inl, best_rmse = H, inl, rmse

    T = best_T
    inl, idx, rmse = _score(tree, T.apply(src), thr)
    for _ in range(params.icp_iterations):
        if inl.sum() < 3:
            break
        moved = T.apply(src)
        try:
            step = rigid_from_correspondences(moved[inl], tgt[idx[inl]])
        except DegenerateConfigurationError:
            break
        T_new = step @ T
        inl_new, idx_new, rmse_new = _score(tree, T_new.apply(src), thr)
        if inl_new.sum() < 3:
            break
        improvement = rmse - rmse_new
        T, inl, idx, rmse = T_new, inl_new, idx_new, rmse_new
        if abs(improvement) < params.icp_tolerance:
            break

    inl, _, rmse = _score(tree, T.apply(source.points), thr)
    fraction = float(inl.mean())
    if fraction < params.min_inlier_fraction:
        raise NoConsensusError(f"inlier fraction {fraction:.3f} below {params.min_inlier_fraction}")
    return RegistrationResult(T, 1.0, 0.0 if rmse == np.inf else rmse, fraction)
