"""Per-frame change detection against depth rendered from the current model."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geom import (CameraIntrinsics, DepthMap, RigidTransform, TriangleMesh,
                   depth_to_pointcloud, points_to_depth)
from .register import (RegistrationError, RegistrationParams, RegistrationResult,
                       estimate_scale, ransac_icp)
from .render import render_depth_mesh

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ChangeMask:
    values: np.ndarray  # bool (H, W)

    @property
    def shape(self):
        return self.values.shape

    def count(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True, eq=False)
class AlignedFrame:
    registered_depth: DepthMap
    registration: RegistrationResult
    imputed_fraction: float
    frame_index: int = 0


def _impute(reprojected: np.ndarray, M_model: DepthMap):
    missing = (reprojected <= 0) & M_model.valid
    out = np.where(missing, M_model.values, reprojected)
    n_model = int(M_model.valid.sum())
    return DepthMap(out.astype(np.float32)), (missing.sum() / n_model if n_model else 0.0)


def align_frame(M_est: DepthMap, M_model: DepthMap, T: RigidTransform, K: CameraIntrinsics,
                params: RegistrationParams = RegistrationParams()) -> AlignedFrame:
    """Scale-correct, register and reproject an estimated depth onto the model render."""
    if M_est.shape != M_model.shape:
        raise ValueError("depth maps differ in size")
    s = estimate_scale(M_est, M_model)
    scaled = DepthMap(M_est.values * np.float32(s))
    source = depth_to_pointcloud(scaled, T, K)
    target = depth_to_pointcloud(M_model, T, K)
    reg = ransac_icp(source, target, params)
    reg = RegistrationResult(reg.transform, s, reg.inlier_rmse, reg.inlier_fraction)
    depth = points_to_depth(reg.transform.apply(source.points), T, K)
    registered, imputed = _impute(depth, M_model)
    return AlignedFrame(registered, reg, float(imputed))


def normalize_frame(M_est: DepthMap, M_model: DepthMap) -> AlignedFrame:
    """Registration-free alternative: only rescale to the model render."""
    s = estimate_scale(M_est, M_model)
    registered, imputed = _impute(M_est.values * s, M_model)
    reg = RegistrationResult(RigidTransform.identity(), s, 0.0, 1.0)
    return AlignedFrame(registered, reg, float(imputed))


def detect_change(M_registered: DepthMap, M_model: DepthMap, threshold: float = 1.0,
                  opening: bool = True) -> ChangeMask:
    """Flag pixels where the new depth lies more than ``threshold`` mm behind the model."""
    if M_registered.shape != M_model.shape:
        raise ValueError("depth maps differ in size")
    both = M_registered.valid & M_model.valid
    diff = M_registered.values.astype(float) - M_model.values.astype(float)
    mask = both & (diff > threshold)
    if opening:
        mask = ndimage.binary_opening(mask, structure=np.ones((3, 3), bool))
    return ChangeMask(mask)


def process_sequence(frames, model_mesh: TriangleMesh, K: CameraIntrinsics, threshold: float = 1.0,
                     params: RegistrationParams = RegistrationParams(), register: bool = True,
                     opening: bool = True) -> list[tuple[AlignedFrame, ChangeMask]]:
    """Align and threshold every ``(depth, pose)`` frame; frames that fail are skipped."""
    frames = list(frames)
    if not frames:
        raise ValueError("empty sequence")
    out = []
    for i, (M, T) in enumerate(frames):
        M_model = render_depth_mesh(model_mesh, T, K)
        try:
            if register:
                aligned = align_frame(M, M_model, T, K, params)
            else:
                aligned = normalize_frame(M, M_model)
        except RegistrationError as exc:
            log.warning("frame %d dropped: %s", i, exc)
            continue
        aligned = AlignedFrame(aligned.registered_depth, aligned.registration,
                               aligned.imputed_fraction, i)
        out.append((aligned, detect_change(aligned.registered_depth, M_model, threshold, opening)))
    return out
