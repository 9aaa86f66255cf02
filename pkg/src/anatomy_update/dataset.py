"""Assemble a complete phantom progression and write it to disk with a manifest."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .geom import CameraIntrinsics, DepthMap, RigidTransform, TriangleMesh
from .phantom import (DEFAULT_INTRINSICS, NoiseModel, PhantomScene, bite_target, default_scene,
                      estimated_depth, gen_trajectory, gt_mesh, render_gt_depth, unchanged_poses)


@dataclass
class BiteData:
    index: int
    scene: PhantomScene
    poses: list[RigidTransform]
    gt_depths: list[DepthMap]
    est_depths: list[DepthMap]

    def frames(self, ground_truth: bool) -> list[tuple[DepthMap, RigidTransform]]:
        return list(zip(self.gt_depths if ground_truth else self.est_depths, self.poses))


@dataclass
class PhantomDataset:
    K: CameraIntrinsics
    preop_scene: PhantomScene
    preop_frames: list[tuple[DepthMap, RigidTransform]]
    bites: list[BiteData]
    eval_poses: list[RigidTransform]
    unchanged_poses: list[RigidTransform]
    markers: np.ndarray  # anatomical landmarks in the preoperative frame
    gt_transforms: list[RigidTransform] = field(default_factory=list)  # preop -> CT frame per step
    voxel_size: float = 0.5
    _meshes: dict = field(default_factory=dict, repr=False)

    def gt_mesh(self, step: int) -> TriangleMesh:
        """Ground truth after ``step`` bites, in the preoperative frame."""
        if step not in self._meshes:
            scene = self.preop_scene if step == 0 else self.bites[step - 1].scene
            self._meshes[step] = gt_mesh(scene, self.voxel_size / 2)
        return self._meshes[step]


def build_dataset(n_frames: int = 80, n_bites: int = 5, n_eval: int = 5,
                  K: CameraIntrinsics = DEFAULT_INTRINSICS, noise: NoiseModel | None = None,
                  seed: int = 0, ct_misalignment=(2.0, 1.0), voxel_size: float = 0.5) -> PhantomDataset:
    """Preoperative sweep, ``n_bites`` sequential bite sweeps and the evaluation setup.

    Ground-truth meshes for step ``k > 0`` are reported in a CT frame displaced
    by ``ct_misalignment`` (degrees, mm) so alignment is exercised.
    """
    noise = noise or NoiseModel(seed=seed)
    rng = np.random.default_rng(seed)
    full = default_scene(n_bites)
    target, _ = bite_target(full)
    pre = full.upto(0)
    phases = rng.uniform(0, 2 * np.pi, size=n_bites + 2)

    preop_poses = gen_trajectory(pre, n_frames, target, phase=phases[0])
    preop = [(render_gt_depth(pre, T, K), T) for T in preop_poses]
    bites = []
    for k in range(1, n_bites + 1):
        scene = full.upto(k)
        poses = gen_trajectory(scene, n_frames, target, phase=phases[k])
        gt = [render_gt_depth(scene, T, K) for T in poses]
        est = [estimated_depth(scene, T, K, noise, 1000 * k + i) for i, T in enumerate(poses)]
        bites.append(BiteData(k, scene, poses, gt, est))
    eval_poses = gen_trajectory(full, n_eval, target, phase=phases[-1], distance=(16.0, 13.0))

    markers = np.array([c for c, _ in pre.bumps], float)
    transforms = [RigidTransform.identity()]
    for _ in range(n_bites):
        axis = rng.standard_normal(3)
        direction = rng.standard_normal(3)
        transforms.append(RigidTransform.from_axis_angle(
            axis, np.radians(ct_misalignment[0]),
            ct_misalignment[1] * direction / np.linalg.norm(direction)))
    return PhantomDataset(K, pre, preop, bites, eval_poses, unchanged_poses(pre), markers, transforms, voxel_size)


def write_dataset(ds: PhantomDataset, out_dir) -> Path:
    """Write PFM depths, ground-truth plys (in their own CT frames) and ``manifest.json``."""
    out = Path(out_dir)
    for sub in ("depth", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    def gt_entry(step: int) -> dict:
        G = ds.gt_transforms[step]
        name = f"gt/step_{step:02d}.ply"
        io.write_ply(out / name, ds.gt_mesh(step).transformed(G))
        return {"mesh": name, "markers": G.apply(ds.markers).tolist(),
                "to_preop": io.pose_to_list(G.inverse())}

    frames = []
    for i, (M, T) in enumerate(ds.preop_frames):
        name = f"depth/preop_{i:03d}.pfm"
        io.write_pfm(out / name, M)
        frames.append({"depth_file": name, "pose": io.pose_to_list(T)})
    preop = {"index": 0, "depth_source": "rendered-ground-truth", "frames": frames,
             "ground_truth": gt_entry(0)}

    bites = []
    for b in ds.bites:
        frames = []
        for i, T in enumerate(b.poses):
            est, gt = f"depth/bite{b.index}_{i:03d}_est.pfm", f"depth/bite{b.index}_{i:03d}_gt.pfm"
            io.write_pfm(out / est, b.est_depths[i])
            io.write_pfm(out / gt, b.gt_depths[i])
            frames.append({"depth_file": est, "gt_depth_file": gt, "pose": io.pose_to_list(T)})
        bites.append({"index": b.index, "depth_source": "estimated", "frames": frames,
                      "ground_truth": gt_entry(b.index)})

    manifest = {
        "pose_convention": io.POSE_CONVENTION,
        "units": "mm",
        "intrinsics": ds.K.to_dict(),
        "preop": preop,
        "bites": bites,
        "evaluation": {
            "eval_poses": [io.pose_to_list(T) for T in ds.eval_poses],
            "unchanged_poses": [io.pose_to_list(T) for T in ds.unchanged_poses],
            "markers": ds.markers.tolist(),
            "bbox_margin_mm": 1.0,
        },
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path
