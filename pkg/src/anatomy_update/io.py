"""File formats: PFM depth, ASCII PLY meshes, binary TSDF volumes and the JSON manifest."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import CameraIntrinsics, DepthMap, RigidTransform, TriangleMesh
from .tsdf import TsdfVolume

VOLUME_MAGIC = b"TSDF"
VOLUME_VERSION = 1
POSE_CONVENTION = "world_to_camera"


class ManifestError(ValueError):
    pass


def write_pfm(path, M: DepthMap | np.ndarray) -> None:
    a = np.asarray(getattr(M, "values", M), dtype="<f4")
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm_array(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind != b"Pf":
            raise ValueError(f"{path}: only grayscale PFM ('Pf') is supported, got {kind!r}")
        dims = f.readline().split()
        while not dims:
            dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h), dtype=dtype)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PFM data")
    return data.reshape(h, w)[::-1].astype(np.float32)


def read_pfm(path) -> DepthMap:
    return DepthMap(read_pfm_array(path))


def write_ply(path, mesh: TriangleMesh) -> None:
    lines = ["ply", "format ascii 1.0", "comment units mm",
             f"element vertex {len(mesh.vertices)}",
             "property float x", "property float y", "property float z",
             f"element face {len(mesh.triangles)}",
             "property list uchar int vertex_indices", "end_header"]
    lines += [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> TriangleMesh:
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n_vert = n_face = 0
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported")
            if tok[0] == "element":
                if tok[1] == "vertex":
                    n_vert = int(tok[2])
                elif tok[1] == "face":
                    n_face = int(tok[2])
            if tok[0] == "end_header":
                break
        verts = np.loadtxt(f, max_rows=n_vert, ndmin=2) if n_vert else np.zeros((0, 3))
        faces = np.loadtxt(f, max_rows=n_face, dtype=np.int64, ndmin=2) if n_face else np.zeros((0, 4), np.int64)
    if len(faces) and np.any(faces[:, 0] != 3):
        raise ValueError(f"{path}: only triangular faces are supported")
    return TriangleMesh(verts[:, :3], faces[:, 1:4])


def write_volume(path, V: TsdfVolume) -> None:
    header = VOLUME_MAGIC + struct.pack("<I3I3d2d", VOLUME_VERSION, *V.dims, *V.origin,
                                        V.voxel_size, V.truncation)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.asarray(V.D, "<f4").tobytes(order="F"))
        f.write(np.asarray(V.W, "<f4").tobytes(order="F"))


def read_volume(path, weight_cap: float = 255.0) -> TsdfVolume:
    raw = Path(path).read_bytes()
    if raw[:4] != VOLUME_MAGIC:
        raise ValueError(f"{path}: bad magic, not a TSDF volume")
    fmt = "<I3I3d2d"
    size = struct.calcsize(fmt)
    version, nx, ny, nz, ox, oy, oz, vs, tr = struct.unpack(fmt, raw[4:4 + size])
    if version != VOLUME_VERSION:
        raise ValueError(f"{path}: unsupported volume version {version}")
    n = nx * ny * nz
    body = np.frombuffer(raw, "<f4", count=2 * n, offset=4 + size)
    D = np.ascontiguousarray(body[:n].reshape((nx, ny, nz), order="F"), np.float32)
    W = np.ascontiguousarray(body[n:].reshape((nx, ny, nz), order="F"), np.float32)
    return TsdfVolume((nx, ny, nz), np.array([ox, oy, oz]), vs, tr, D, W, weight_cap)


def pose_to_list(T: RigidTransform) -> list[float]:
    return [float(x) for x in T.matrix.reshape(-1)]


def pose_from_list(values) -> RigidTransform:
    values = list(values)
    if len(values) != 16:
        raise ValueError(f"pose needs 16 numbers, got {len(values)}")
    return RigidTransform.from_matrix(values)


@dataclass
class FrameRef:
    depth_file: Path
    pose: RigidTransform
    gt_depth_file: Path | None = None


@dataclass
class StepRef:
    index: int
    depth_source: str
    frames: list[FrameRef]
    gt_mesh: Path | None = None
    gt_markers: list | None = None
    gt_to_preop: RigidTransform | None = None  # known answer, for checking alignment only


@dataclass
class Manifest:
    path: Path
    intrinsics: CameraIntrinsics
    preop: StepRef
    bites: list[StepRef]
    eval_poses: list[RigidTransform] = field(default_factory=list)
    unchanged_poses: list[RigidTransform] = field(default_factory=list)
    markers: list | None = None
    bbox_margin: float = 1.0

    @property
    def root(self) -> Path:
        return self.path.parent

    @property
    def has_ground_truth(self) -> bool:
        return self.preop.gt_mesh is not None and all(b.gt_mesh is not None for b in self.bites)


def _require(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise ManifestError(f"{where}: missing '{key}'")
    return d[key]


def _parse_step(d, where, root: Path) -> StepRef:
    frames = _require(d, "frames", where)
    if not isinstance(frames, list) or not frames:
        raise ManifestError(f"{where}.frames: need at least one frame")
    refs = []
    for i, fr in enumerate(frames):
        fw = f"{where}.frames[{i}]"
        try:
            pose = pose_from_list(_require(fr, "pose", fw))
        except ManifestError:
            raise
        except (ValueError, TypeError) as exc:
            raise ManifestError(f"{fw}.pose: {exc}") from None
        gt = fr.get("gt_depth_file")
        refs.append(FrameRef(root / _require(fr, "depth_file", fw), pose, root / gt if gt else None))
    source = d.get("depth_source", "estimated")
    if source not in ("rendered-ground-truth", "estimated"):
        raise ManifestError(f"{where}.depth_source: unknown value {source!r}")
    gt = d.get("ground_truth") or {}
    to_preop = gt.get("to_preop")
    return StepRef(int(_require(d, "index", where)), source, refs,
                   root / gt["mesh"] if gt.get("mesh") else None,
                   gt.get("markers"), pose_from_list(to_preop) if to_preop else None)


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    except OSError as exc:
        raise ManifestError(f"{path}: {exc.strerror}") from None
    where = str(path)
    if data.get("pose_convention", POSE_CONVENTION) != POSE_CONVENTION:
        raise ManifestError(f"{where}: pose_convention must be '{POSE_CONVENTION}'")
    try:
        K = CameraIntrinsics.from_dict(_require(data, "intrinsics", where))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ManifestError(f"{where}: intrinsics: {exc}") from None
    root = path.parent
    preop = _parse_step(_require(data, "preop", where), f"{where}: preop", root)
    bites_raw = _require(data, "bites", where)
    if not isinstance(bites_raw, list) or not bites_raw:
        raise ManifestError(f"{where}: bites: need at least one bite step")
    bites = [_parse_step(b, f"{where}: bites[{i}]", root) for i, b in enumerate(bites_raw)]
    for i, b in enumerate(bites):
        if b.index != i + 1:
            raise ManifestError(f"{where}: bites[{i}]: index {b.index} out of order, expected {i + 1}")
    ev = data.get("evaluation") or {}
    try:
        eval_poses = [pose_from_list(p) for p in ev.get("eval_poses", [])]
        unchanged = [pose_from_list(p) for p in ev.get("unchanged_poses", [])]
    except ValueError as exc:
        raise ManifestError(f"{where}: evaluation: {exc}") from None
    return Manifest(path, K, preop, bites, eval_poses, unchanged, ev.get("markers"),
                    float(ev.get("bbox_margin_mm", 1.0)))


def frame_depth(ref: FrameRef, ground_truth: bool = False) -> DepthMap:
    if ground_truth:
        if ref.gt_depth_file is None:
            raise ManifestError(f"frame {ref.depth_file}: no gt_depth_file for ground-truth mode")
        return read_pfm(ref.gt_depth_file)
    return read_pfm(ref.depth_file)
