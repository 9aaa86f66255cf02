"""Incremental update of a TSDF anatomy model from depth sequences.

Modules: ``geom`` (cameras, poses, depth maps), ``tsdf`` (fusion, marching
cubes), ``render`` (depth from meshes and volumes), ``register`` (scale,
RANSAC + ICP), ``change`` (per-frame change masks), ``pipeline``
(preoperative model and masked updates), ``phantom`` / ``dataset``
(synthetic ground truth), ``evaluation`` and ``io``.
"""
from .geom import CameraIntrinsics, DepthMap, PointCloud, RigidTransform, TriangleMesh
from .pipeline import SurgicalStep, UpdateConfig, build_preop, run_progression, update_step
from .tsdf import TsdfVolume, extract_mesh, integrate_frame, new_volume

__version__ = "0.1.0"
