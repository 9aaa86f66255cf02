"""Ground-truth comparison: alignment, change box and pixelwise correspondence error."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geom import (CameraIntrinsics, PointCloud, RigidTransform, TriangleMesh,
                   depth_to_camera_points, depth_to_pointcloud)
from .register import RegistrationParams, ransac_icp, rigid_from_correspondences
from .render import render_depth_mesh

VARIANTS = ("no_update", "updated", "depth_ablation", "registration_ablation")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if not np.all(hi > lo):
            raise EvaluationError("box must have positive extent on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)


@dataclass(frozen=True)
class EvalProtocol:
    eval_poses: tuple[RigidTransform, ...]
    bbox: Box
    gt_alignment: RigidTransform = RigidTransform.identity()
    gt_residual: float = 0.0

    def __post_init__(self):
        if not self.eval_poses:
            raise EvaluationError("at least one evaluation pose is required")
        object.__setattr__(self, "eval_poses", tuple(self.eval_poses))


@dataclass(frozen=True)
class ErrorStats:
    mean: float
    std: float
    count: int


def align_gt(gt_mesh: TriangleMesh, ref_mesh: TriangleMesh, marker_pairs, unchanged_poses,
             K: CameraIntrinsics, params: RegistrationParams = RegistrationParams()):
    """Transform taking ``gt_mesh`` into the frame of ``ref_mesh``, and its residual (mm).

    ``marker_pairs`` are ``(gt_point, ref_point)`` tuples giving a coarse fit,
    refined by ICP on depth rendered at poses that see no anatomical change.
    """
    pairs = list(marker_pairs)
    if len(pairs) < 3:
        raise EvaluationError("at least three marker pairs are required")
    if not unchanged_poses:
        raise EvaluationError("at least one unchanged pose is required")
    P = np.array([p for p, _ in pairs], float)
    Q = np.array([q for _, q in pairs], float)
    coarse = rigid_from_correspondences(P, Q)
    moved = gt_mesh.transformed(coarse)
    src, tgt = [], []
    for T in unchanged_poses:
        src.append(depth_to_pointcloud(render_depth_mesh(moved, T, K), T, K).points)
        tgt.append(depth_to_pointcloud(render_depth_mesh(ref_mesh, T, K), T, K).points)
    fine = ransac_icp(PointCloud(np.concatenate(src)), PointCloud(np.concatenate(tgt)), params)
    return fine.transform @ coarse, fine.inlier_rmse


def _marker_fit(pairs):
    P = np.array([p for p, _ in pairs], float)
    Q = np.array([q for _, q in pairs], float)
    T = rigid_from_correspondences(P, Q)
    return T, float(np.sqrt(np.mean(np.sum((T.apply(P) - Q) ** 2, axis=1))))


def _nn_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cKDTree(b).query(a)[0]


def change_bbox(final_gt_mesh: TriangleMesh, preop_mesh: TriangleMesh, margin: float = 1.0,
                threshold: float = 1.0) -> Box:
    """Box around surface that moved by more than ``threshold`` between the two meshes.

    Both removed preoperative surface and newly exposed surface are enclosed,
    so the box covers the carved volume, then grows by ``margin`` per side.
    """
    a = preop_mesh.vertices[_nn_distance(preop_mesh.vertices, final_gt_mesh.vertices) > threshold]
    b = final_gt_mesh.vertices[_nn_distance(final_gt_mesh.vertices, preop_mesh.vertices) > threshold]
    changed = np.concatenate([a, b])
    if len(changed) == 0:
        raise EvaluationError("meshes show no change above the threshold")
    return Box(changed.min(0) - margin, changed.max(0) + margin)


def correspondence_pairs(mesh_a: TriangleMesh, mesh_b: TriangleMesh, T: RigidTransform,
                         K: CameraIntrinsics, bbox: Box) -> np.ndarray:
    """Per-pixel distances at one pose, restricted to ``mesh_b`` points inside ``bbox``."""
    Ma = render_depth_mesh(mesh_a, T, K)
    Mb = render_depth_mesh(mesh_b, T, K)
    both = (Ma.valid & Mb.valid).reshape(-1)
    pa, ia = depth_to_camera_points(Ma, K)
    pb, ib = depth_to_camera_points(Mb, K)
    A = np.zeros((K.width * K.height, 3))
    B = np.zeros_like(A)
    A[ia], B[ib] = pa, pb
    idx = np.flatnonzero(both)
    Bw = T.inverse().apply(B[idx])
    keep = bbox.contains(Bw)
    return np.linalg.norm(A[idx[keep]] - B[idx[keep]], axis=1)


def correspondence_error(mesh_a: TriangleMesh, mesh_b: TriangleMesh, protocol: EvalProtocol,
                         K: CameraIntrinsics) -> ErrorStats:
    """Mean and std of pixelwise 3-D distances; ``mesh_b`` is the reference."""
    errs = np.concatenate([correspondence_pairs(mesh_a, mesh_b, T, K, protocol.bbox)
                           for T in protocol.eval_poses])
    if errs.size == 0:
        raise EvaluationError("no correspondences inside the change box")
    return ErrorStats(float(np.mean(errs)), float(np.std(errs)), int(errs.size))


def report_table(gt_meshes, variant_meshes: dict, protocol: EvalProtocol, K: CameraIntrinsics,
                 no_update_mesh: TriangleMesh | None = None) -> list[dict]:
    """One row per bite: ``{"step": k, variant: ErrorStats | None, ...}``.

    ``gt_meshes[k-1]`` is the aligned ground truth after bite ``k``;
    ``variant_meshes[name][k-1]`` the corresponding model. Missing variants
    (or missing steps) stay ``None``.
    """
    gt_meshes = list(gt_meshes)
    if not gt_meshes:
        raise EvaluationError("empty progression")
    rows = []
    for k, gt in enumerate(gt_meshes, start=1):
        row = {"step": k}
        for name in VARIANTS:
            if name == "no_update":
                mesh = no_update_mesh
            else:
                meshes = variant_meshes.get(name) or []
                mesh = meshes[k - 1] if k - 1 < len(meshes) else None
            row[name] = None if mesh is None else correspondence_error(mesh, gt, protocol, K)
        rows.append(row)
    return rows


def format_table(rows) -> str:
    header = ["step"] + list(VARIANTS)
    cells = [header]
    for row in rows:
        line = [f"bite {row['step']}"]
        for name in VARIANTS:
            s = row.get(name)
            line.append("" if s is None else f"{s.mean:.3f} +/- {s.std:.3f}")
        cells.append(line)
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells) + "\n"


def format_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "variant", "mean_mm", "std_mm", "count"])
    for row in rows:
        for name in VARIANTS:
            s = row.get(name)
            if s is None:
                w.writerow([row["step"], name, "", "", ""])
            else:
                w.writerow([row["step"], name, f"{s.mean:.6f}", f"{s.std:.6f}", s.count])
    return buf.getvalue()


def evaluate_run(manifest, run_dir, params: RegistrationParams = RegistrationParams()) -> dict:
    """Score the meshes of a progression run directory against the manifest's ground truth.

    Ground-truth meshes are first brought into the preoperative frame with
    ``align_gt`` (markers, then ICP on the unchanged views against the
    preoperative ground truth, which itself only gets the marker fit since it
    defines the reference frame). Writes
    ``report.csv`` and ``report.txt`` into ``run_dir`` and returns a summary.
    """
    from . import io as fio
    if not isinstance(manifest, fio.Manifest):
        manifest = fio.load_manifest(manifest)
    run = Path(run_dir)
    K = manifest.intrinsics
    if not manifest.has_ground_truth:
        raise EvaluationError(f"{manifest.path}: no ground-truth meshes to evaluate against")
    if not manifest.eval_poses:
        raise EvaluationError(f"{manifest.path}: no evaluation poses")
    preop_model = fio.read_ply(run / "preop" / "mesh.ply")
    markers = manifest.markers
    steps = [manifest.preop] + list(manifest.bites)
    aligned, residuals = [], []
    for step in steps:
        mesh = fio.read_ply(step.gt_mesh)
        if markers is None or step.gt_markers is None:
            raise EvaluationError(f"step {step.index}: marker correspondences are missing")
        pairs = list(zip(step.gt_markers, markers))
        if step.index == 0:
            T, res = _marker_fit(pairs)
        else:
            T, res = align_gt(mesh, aligned[0], pairs, manifest.unchanged_poses, K, params)
        aligned.append(mesh.transformed(T))
        residuals.append(res)
    bbox = change_bbox(aligned[-1], aligned[0], manifest.bbox_margin)
    protocol = EvalProtocol(tuple(manifest.eval_poses), bbox)
    variants = {}
    for name in VARIANTS[1:]:
        paths = [run / name / f"step_{b.index}" / "mesh.ply" for b in manifest.bites]
        if all(p.exists() for p in paths):
            variants[name] = [fio.read_ply(p) for p in paths]
    rows = report_table(aligned[1:], variants, protocol, K, preop_model)
    (run / "report.csv").write_text(format_csv(rows))
    (run / "report.txt").write_text(format_table(rows))
    return {"gt_alignment_residual_mm": residuals,
            "bbox": [bbox.lo.tolist(), bbox.hi.tolist()],
            "rows": [{k: (v if k == "step" or v is None else [v.mean, v.std, v.count])
                      for k, v in r.items()} for r in rows]}
