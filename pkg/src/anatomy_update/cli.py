"""Command-line entry point: ``anatomy-update <command> [options]``.

Failures print one JSON line ``{"error": ..., "message": ...}`` on stderr and
exit nonzero (1 for runtime errors, 2 for usage errors).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import io
from .pipeline import VARIANT_MODES, UpdateConfig

log = logging.getLogger("anatomy_update")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _global_flags() -> argparse.ArgumentParser:
    # SUPPRESS so a flag given before the subcommand is not reset by the subparser default
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", type=Path, help="JSON or YAML file with UpdateConfig fields")
    p.add_argument("--seed", type=int, help="rng seed (registration sampling, synthetic data)")
    p.add_argument("--sequence-length", type=int, help="use at most this many frames per bite step")
    p.add_argument("--reset-changed-weights", action="store_true",
                   help="zero accumulated weight where a voxel is first flagged as changed")
    p.add_argument("--threshold-mm", type=float, help="change-detection threshold in mm")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="anatomy-update", parents=[common],
                     description="Incremental TSDF anatomy updates from depth sequences.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a phantom dataset and manifest")
    p.add_argument("out", type=Path)
    p.add_argument("--frames", type=int, default=80)
    p.add_argument("--bites", type=int, default=5)
    p.add_argument("--eval-poses", type=int, default=5)

    p = sub.add_parser("init", parents=[common], help="fuse the preoperative volume")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="volume file to write")
    p.add_argument("--mesh", type=Path, help="also write the extracted mesh")

    p = sub.add_parser("update", parents=[common], help="apply one bite to a volume")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--volume", type=Path, required=True, help="model before the step")
    p.add_argument("--step", type=int, required=True, help="bite index (1-based)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variant", choices=list(VARIANT_MODES), default="updated")
    p.add_argument("--mesh", type=Path)

    p = sub.add_parser("run", parents=[common], help="full progression for every variant")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variants", nargs="+", choices=list(VARIANT_MODES), default=list(VARIANT_MODES))

    p = sub.add_parser("extract-mesh", parents=[common], help="marching cubes on a volume file")
    p.add_argument("volume", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--min-weight", type=float)

    p = sub.add_parser("evaluate", parents=[common], help="score a run directory")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--run", type=Path, required=True)
    return parser


def resolve_config(args) -> UpdateConfig:
    cfg = UpdateConfig.from_file(args.config) if getattr(args, "config", None) else UpdateConfig()
    over = {}
    if hasattr(args, "seed"):
        over["seed"] = args.seed
    if hasattr(args, "sequence_length"):
        over["sequence_length"] = args.sequence_length
    if getattr(args, "reset_changed_weights", False):
        over["reset_changed_weights"] = True
    if hasattr(args, "threshold_mm"):
        over["change_threshold"] = args.threshold_mm
    return replace(cfg, **over)


def cmd_synth(args, cfg):
    from .dataset import build_dataset, write_dataset
    ds = build_dataset(n_frames=args.frames, n_bites=args.bites, n_eval=args.eval_poses,
                       seed=cfg.seed, voxel_size=cfg.voxel_size)
    path = write_dataset(ds, args.out)
    print(path)


def cmd_init(args, cfg):
    from .pipeline import _manifest_frames, build_preop
    from .tsdf import extract_mesh
    m = io.load_manifest(args.manifest)
    frames = _manifest_frames(m.preop, True)
    V = build_preop(frames, m.intrinsics, cfg)
    io.write_volume(args.out, V)
    if args.mesh:
        io.write_ply(args.mesh, extract_mesh(V, cfg.min_weight))
    print(args.out)


def cmd_update(args, cfg):
    from .pipeline import SurgicalStep, _manifest_frames, apply_update
    from .tsdf import extract_mesh
    m = io.load_manifest(args.manifest)
    if not 1 <= args.step <= len(m.bites):
        raise ValueError(f"step {args.step} not in manifest (1..{len(m.bites)})")
    ground_truth, register = VARIANT_MODES[args.variant]
    frames = _manifest_frames(m.bites[args.step - 1], ground_truth)
    if frames is None:
        raise ValueError(f"manifest has no ground-truth depth for step {args.step}")
    V = io.read_volume(args.volume, cfg.weight_cap)
    source = "rendered-ground-truth" if ground_truth else "estimated"
    res = apply_update(V, SurgicalStep(args.step, frames, source), m.intrinsics,
                       replace(cfg, register=register))
    io.write_volume(args.out, V)
    if args.mesh:
        io.write_ply(args.mesh, extract_mesh(V, cfg.min_weight))
    print(json.dumps({"step": args.step, "frames_used": len(res.frames),
                      "changed_voxels": int(res.touched.sum())}))


def cmd_run(args, cfg):
    from .pipeline import run_progression
    summary = run_progression(args.manifest, cfg, args.out, tuple(args.variants))
    report = args.out / "report.txt"
    if report.exists():
        sys.stdout.write(report.read_text())
    else:
        print(json.dumps(summary["variants"]))


def cmd_extract_mesh(args, cfg):
    from .tsdf import extract_mesh
    V = io.read_volume(args.volume, cfg.weight_cap)
    mesh = extract_mesh(V, cfg.min_weight if args.min_weight is None else args.min_weight)
    io.write_ply(args.out, mesh)
    print(json.dumps({"vertices": len(mesh.vertices), "triangles": len(mesh.triangles)}))


def cmd_evaluate(args, cfg):
    from .evaluation import evaluate_run
    evaluate_run(args.manifest, args.run, cfg.registration_params())
    sys.stdout.write((args.run / "report.txt").read_text())


COMMANDS = {"synth": cmd_synth, "init": cmd_init, "update": cmd_update, "run": cmd_run,
            "extract-mesh": cmd_extract_mesh, "evaluate": cmd_evaluate}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", str(exc), 2)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except Exception as exc:  # every failure becomes one machine-readable line
        log.debug("command failed", exc_info=True)
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
