"""Model construction and sequential per-bite updates."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .change import AlignedFrame, ChangeMask, process_sequence
from .geom import CameraIntrinsics, DepthMap, RigidTransform, depth_to_pointcloud
from .register import RegistrationParams
from .tsdf import TsdfVolume, extract_mesh, integrate_frame, new_volume

log = logging.getLogger(__name__)

DEPTH_SOURCES = ("rendered-ground-truth", "estimated")


@dataclass(frozen=True)
class UpdateConfig:
    voxel_size: float = 0.5
    truncation: float = 1.0
    change_threshold: float = 1.0
    min_weight: float = 1.0
    weight_cap: float = 255.0
    reset_changed_weights: bool = False
    seed: int = 0
    sequence_length: int | None = None
    hull_margin_fraction: float = 0.1
    hull_margin_mm: float = 5.0  # floor on the margin so carved tissue stays inside the grid
    mask_opening: bool = True
    register: bool = True  # False: scale normalization only (registration ablation)
    inlier_threshold: float | None = None  # defaults to 2 * voxel_size

    def __post_init__(self):
        for name in ("voxel_size", "truncation", "change_threshold", "weight_cap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.min_weight < 0 or self.hull_margin_fraction < 0 or self.hull_margin_mm < 0:
            raise ValueError("margins and min_weight must be non-negative")
        if self.sequence_length is not None and self.sequence_length < 1:
            raise ValueError("sequence_length must be >= 1")

    def registration_params(self) -> RegistrationParams:
        thr = self.inlier_threshold or 2.0 * self.voxel_size
        return RegistrationParams(inlier_threshold=thr, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UpdateConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "UpdateConfig":
        path = Path(path)
        text = path.read_text()
        if path.suffix in (".yaml", ".yml"):
            import yaml
            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
        return cls.from_dict(data)


@dataclass
class SurgicalStep:
    index: int
    frames: list  # (DepthMap, RigidTransform) pairs
    depth_source: str = "estimated"

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("step index must be >= 0")
        if not self.frames:
            raise ValueError("a surgical step needs at least one frame")
        if self.depth_source not in DEPTH_SOURCES:
            raise ValueError(f"depth_source must be one of {DEPTH_SOURCES}")

    def truncated(self, n: int | None) -> "SurgicalStep":
        return self if n is None else replace(self, frames=self.frames[:n])


def visual_hull_bounds(frames, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = np.full(3, np.inf), np.full(3, -np.inf)
    for M, T in frames:
        pts = depth_to_pointcloud(M, T, K).points
        if len(pts):
            lo = np.minimum(lo, pts.min(0))
            hi = np.maximum(hi, pts.max(0))
    if not np.all(np.isfinite(lo)):
        raise ValueError("no valid depth in any frame")
    return lo, hi


def build_preop(frames, K: CameraIntrinsics, config: UpdateConfig = UpdateConfig()) -> TsdfVolume:
    """Fuse ground-truth preoperative depth renders with unit weights."""
    frames = list(frames)
    if not frames:
        raise ValueError("empty preoperative sequence")
    lo, hi = visual_hull_bounds(frames, K)
    margin = np.maximum(config.hull_margin_fraction * (hi - lo), config.hull_margin_mm)
    lo, hi = lo - margin, hi + margin
    vs = config.voxel_size
    lo = np.floor(lo / vs) * vs
    dims = np.maximum(np.ceil((hi - lo) / vs).astype(int) + 1, 2)
    V = new_volume(dims, lo, vs, config.truncation, config.weight_cap)
    for M, T in frames:
        integrate_frame(V, M, T, K)
    return V


@dataclass
class StepResult:
    index: int
    frames: list[tuple[AlignedFrame, ChangeMask]]
    touched: np.ndarray = field(repr=False)  # flat bool per voxel


def apply_update(V: TsdfVolume, step: SurgicalStep, K: CameraIntrinsics,
                 config: UpdateConfig = UpdateConfig()) -> StepResult:
    """One model update: detect change per frame, then fuse masked registered depth."""
    step = step.truncated(config.sequence_length)
    model = extract_mesh(V, config.min_weight)
    if model.is_empty:
        raise ValueError("current model has no surface to compare against")
    results = process_sequence(step.frames, model, K, config.change_threshold,
                               config.registration_params(), register=config.register,
                               opening=config.mask_opening)
    if not results:
        raise RuntimeError(f"every frame of step {step.index} failed registration")
    touched = np.zeros(V.D.size, bool)
    for aligned, mask in results:
        _, T = step.frames[aligned.frame_index]
        integrate_frame(V, aligned.registered_depth, T, K, mask.values.astype(np.float32),
                        touched=touched, reset_untouched=config.reset_changed_weights)
    return StepResult(step.index, results, touched)


def update_step(V: TsdfVolume, step: SurgicalStep, K: CameraIntrinsics,
                config: UpdateConfig = UpdateConfig()) -> TsdfVolume:
    apply_update(V, step, K, config)
    return V


# variant -> (use ground-truth depth, register frames)
VARIANT_MODES = {
    "updated": (False, True),
    "depth_ablation": (True, True),
    "registration_ablation": (False, False),
}


@dataclass
class VariantRun:
    name: str
    volumes: list[TsdfVolume]  # snapshot after each bite
    steps: list[StepResult]


def run_variant(V0: TsdfVolume, bites, K: CameraIntrinsics, config: UpdateConfig,
                name: str = "updated") -> VariantRun:
    """Fold ``apply_update`` over ``bites`` starting from a copy of ``V0``.

    ``bites[k-1]`` maps a depth source to that bite's ``(depth, pose)`` frames.
    """
    ground_truth, register = VARIANT_MODES[name]
    source = "rendered-ground-truth" if ground_truth else "estimated"
    cfg = replace(config, register=register)
    V = V0.copy()
    volumes, steps = [], []
    for k, frames in enumerate(bites, start=1):
        if frames.get(source) is None:
            raise ValueError(f"bite {k} has no {source} depth for variant {name}")
        steps.append(apply_update(V, SurgicalStep(k, frames[source], source), K, cfg))
        volumes.append(V.copy())
        log.info("%s: bite %d fused from %d frames", name, k, len(steps[-1].frames))
    return VariantRun(name, volumes, steps)


def _manifest_frames(step, ground_truth: bool):
    from . import io
    if ground_truth and any(f.gt_depth_file is None for f in step.frames):
        if step.depth_source != "rendered-ground-truth":
            return None
        ground_truth = False
    return [(io.frame_depth(f, ground_truth), f.pose) for f in step.frames]


def _write_step(out: Path, V: TsdfVolume, result: StepResult, config: UpdateConfig) -> None:
    from . import io
    out.mkdir(parents=True, exist_ok=True)
    io.write_volume(out / "volume.tsdf", V)
    io.write_ply(out / "mesh.ply", extract_mesh(V, config.min_weight))
    masks = np.stack([m.values for _, m in result.frames]).astype(np.uint8)
    np.save(out / "masks.npy", masks)
    info = [{"frame": a.frame_index, "scale": a.registration.scale,
             "inlier_rmse": a.registration.inlier_rmse,
             "inlier_fraction": a.registration.inlier_fraction,
             "imputed_fraction": a.imputed_fraction, "changed_pixels": m.count()}
            for a, m in result.frames]
    (out / "frames.json").write_text(json.dumps(info, indent=1))


def run_progression(manifest, config: UpdateConfig, out_dir, variants=tuple(VARIANT_MODES)) -> dict:
    """Preoperative fusion, then every bite for each variant, written under ``out_dir``.

    Layout: ``preop/{volume.tsdf,mesh.ply}``, ``<variant>/step_k/{volume.tsdf,
    mesh.ply,masks.npy,frames.json}``, and ``report.{csv,txt}`` plus
    ``summary.json`` when the manifest carries ground truth. Variants whose
    depth source is missing from the manifest are skipped.
    """
    from . import io
    from .evaluation import evaluate_run
    if not isinstance(manifest, io.Manifest):
        manifest = io.load_manifest(manifest)
    out = Path(out_dir)
    K = manifest.intrinsics
    preop_frames = _manifest_frames(manifest.preop, True)
    V0 = build_preop(preop_frames, K, config)  # sequence_length limits bite steps only
    (out / "preop").mkdir(parents=True, exist_ok=True)
    io.write_volume(out / "preop" / "volume.tsdf", V0)
    io.write_ply(out / "preop" / "mesh.ply", extract_mesh(V0, config.min_weight))

    summary = {"config": config.to_dict(), "manifest": str(manifest.path), "variants": {}}
    for name in variants:
        ground_truth, _ = VARIANT_MODES[name]
        bites = []
        for b in manifest.bites:
            frames = _manifest_frames(b, ground_truth)
            bites.append({"rendered-ground-truth" if ground_truth else "estimated": frames})
        if any(next(iter(f.values())) is None for f in bites):
            log.warning("variant %s skipped: manifest lacks its depth source", name)
            continue
        run = run_variant(V0, bites, K, config, name)
        for k, (V, res) in enumerate(zip(run.volumes, run.steps), start=1):
            _write_step(out / name / f"step_{k}", V, res, config)
        summary["variants"][name] = [len(r.frames) for r in run.steps]
    if manifest.has_ground_truth and manifest.eval_poses:
        summary["evaluation"] = evaluate_run(manifest, out)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary
